//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "synthetic-calico"
//! variant = "calico"            # baseline | active | calico | equal
//! seeds = [0, 1, 2]
//! output = "runs/synthetic"     # relative paths resolve against $CALICO_OUTPUT_ROOT
//!
//! [dataset]
//! synthetic = { classes = 3, per_class = 400, sigma = 0.45 }
//! initial_labeled = 20
//! eval_fraction = 0.5
//!
//! [train]
//! learning_rate = 0.1
//!
//! [sgld]
//! step_size = 0.01
//! noise_std = 0.1
//!
//! [al]
//! rounds = 10
//! query = { strategy = "least_confidence", size = 10 }
//! ```

use std::path::{Path, PathBuf};

use calico_core::data::{load_dataset, make_synthetic, Dataset, DatasetFormat, SyntheticSpec};
use calico_core::model::{Activation, Arch};
use calico_core::orchestrator::{AlConfig, OracleKind};
use calico_core::query::Strategy;
use calico_core::sgld::SgldConfig;
use calico_core::trainer::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Relative output directories are placed under this directory when set.
pub const OUTPUT_ROOT_VAR: &str = "CALICO_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Softmax classifier trained once on the full labeled training set.
    Baseline,
    /// Softmax classifier inside the active-learning loop.
    Active,
    /// Joint classifier and energy model inside the active-learning loop.
    Calico,
    /// Calico with per-class query quotas.
    Equal,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Active => "active",
            Variant::Calico => "calico",
            Variant::Equal => "equal",
        }
    }

    pub fn uses_loop(self) -> bool {
        self != Variant::Baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Fixed generator seed; by default each run seed draws its own data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_classes() -> usize {
    3
}
fn default_per_class() -> usize {
    400
}
fn default_sigma() -> f64 {
    0.45
}
fn default_initial_labeled() -> usize {
    20
}
fn default_eval_fraction() -> f64 {
    0.5
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: default_classes(),
            per_class: default_per_class(),
            sigma: default_sigma(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Inferred from the path when absent: `.csv` files are CSV, directories archives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default = "default_initial_labeled")]
    pub initial_labeled: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Display names for the annotation service, in class order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    pub fn synthetic(section: SyntheticSection) -> Self {
        DatasetSpec {
            path: None,
            format: None,
            synthetic: Some(section),
            initial_labeled: default_initial_labeled(),
            eval_fraction: default_eval_fraction(),
            class_names: Vec::new(),
        }
    }

    /// Parses a `--dataset` value: `synthetic[:key=value,..]` or a path.
    pub fn parse_source(raw: &str) -> Result<(Option<PathBuf>, Option<SyntheticSection>)> {
        let Some(rest) = raw.strip_prefix("synthetic") else {
            return Ok((Some(PathBuf::from(raw)), None));
        };
        let mut section = SyntheticSection::default();
        let rest = rest.trim_start_matches(':');
        for pair in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("`{pair}` is not key=value")))?;
            let bad = || HarnessError::config(format!("bad value for {key}: `{value}`"));
            match key.trim() {
                "classes" => section.classes = value.trim().parse().map_err(|_| bad())?,
                "per_class" => section.per_class = value.trim().parse().map_err(|_| bad())?,
                "sigma" => section.sigma = value.trim().parse().map_err(|_| bad())?,
                "seed" => section.seed = Some(value.trim().parse().map_err(|_| bad())?),
                other => return Err(HarnessError::config(format!("unknown synthetic key `{other}`"))),
            }
        }
        Ok((None, Some(section)))
    }

    fn format(&self, path: &Path) -> DatasetFormat {
        self.format.unwrap_or_else(|| {
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                DatasetFormat::Csv
            } else {
                DatasetFormat::Archive
            }
        })
    }

    /// Loads or generates the dataset for one run seed. Relative paths
    /// resolve against `base`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<Dataset> {
        match (&self.path, &self.synthetic) {
            (Some(path), None) => {
                let path = if path.is_relative() { base.join(path) } else { path.clone() };
                Ok(load_dataset(&path, self.format(&path))?)
            }
            (None, Some(s)) => {
                let spec = SyntheticSpec::unit_circle(s.classes, s.per_class, s.sigma, s.seed.unwrap_or(seed));
                let mut ds = make_synthetic(&spec)?;
                ds.name = format!("synthetic-{}x{}-s{}", s.classes, s.per_class, s.sigma);
                Ok(ds)
            }
            _ => Err(HarnessError::config("dataset needs exactly one of `path` or `synthetic`")),
        }
    }

    /// Dataset name as far as it can be told without loading it.
    pub fn label(&self) -> String {
        match (&self.path, &self.synthetic) {
            (Some(p), _) => p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
            _ => "synthetic".into(),
        }
    }
}

/// Network family; input size and class count come from the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// 64-64 swish MLP for vectors, 16-32 channel CNN for images.
    #[default]
    Reference,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    Cnn {
        conv: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_activation() -> Activation {
    Activation::Swish
}

impl ModelSpec {
    pub fn arch_for(&self, ds: &Dataset) -> Result<Arch> {
        let k = ds.num_classes;
        match (self, ds.image) {
            (ModelSpec::Reference, Some(s)) => Ok(Arch::reference_cnn(s.height, s.width, s.channels, k)),
            (ModelSpec::Reference, None) => Ok(Arch::reference_mlp(ds.dim, k)),
            (ModelSpec::Mlp { hidden, activation }, _) => Ok(Arch::Mlp {
                input: ds.dim,
                hidden: hidden.clone(),
                classes: k,
                activation: *activation,
            }),
            (ModelSpec::Cnn { conv, activation }, Some(s)) => Ok(Arch::Cnn {
                height: s.height,
                width: s.width,
                channels: s.channels,
                conv: conv.clone(),
                classes: k,
                activation: *activation,
            }),
            (ModelSpec::Cnn { .. }, None) => Err(HarnessError::config("a cnn model needs an image dataset")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_oracle_kind")]
    pub kind: OracleKind,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
}

fn default_oracle_kind() -> OracleKind {
    OracleKind::Simulated
}
fn default_poll_ms() -> u64 {
    100
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            kind: default_oracle_kind(),
            poll_interval_ms: default_poll_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Absent for the softmax-only variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgld: Option<SgldConfig>,
    /// Absent for the baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub al: Option<AlConfig>,
    #[serde(default)]
    pub oracle: OracleSpec,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Protocol {
    /// Synthetic-scale defaults from the configuration file.
    #[default]
    Desk,
    /// Query 250 per round, 16 rounds, 4000-label cap, empty seed pool.
    Paper,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub stop_accuracy: Option<f64>,
    pub protocol: Protocol,
}

/// Settings the file states explicitly, which defaults must not mask.
#[derive(Debug, Clone, Default)]
struct Explicit {
    gen_weight: Option<f64>,
    strategy: Option<String>,
    labels_per_class: bool,
}

fn lookup<'a>(table: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (last, parents) = path.split_last()?;
    let mut t = table;
    for p in parents {
        t = t.get(*p)?.as_table()?;
    }
    t.get(*last)
}

/// Per-dataset equal-class settings: (label limit, labels per class).
pub fn equal_class_preset(dataset: &str) -> Option<(usize, usize)> {
    let key = dataset.to_ascii_lowercase();
    if key.contains("blood") {
        Some((4000, 50))
    } else if key.contains("organs") || key.contains("organc") {
        Some((3850, 35))
    } else if key.contains("pneumonia") {
        Some((2400, 100))
    } else {
        None
    }
}

/// Parses `acc>=X`; X may be a fraction or a percentage.
pub fn parse_stop_when(raw: &str) -> Result<f64> {
    let value = raw
        .trim()
        .strip_prefix("acc>=")
        .ok_or_else(|| HarnessError::config(format!("expected acc>=X, got `{raw}`")))?;
    let x: f64 = value
        .trim()
        .trim_end_matches('%')
        .parse()
        .map_err(|_| HarnessError::config(format!("`{value}` is not a number")))?;
    let x = if x > 1.0 { x / 100.0 } else { x };
    if !(0.0..=1.0).contains(&x) {
        return Err(HarnessError::config(format!("accuracy target {x} outside [0, 1]")));
    }
    Ok(x)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let explicit = Explicit {
            gen_weight: lookup(&table, &["train", "gen_weight"]).and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64))),
            strategy: lookup(&table, &["al", "query", "strategy"]).and_then(|v| v.as_str().map(String::from)),
            labels_per_class: lookup(&table, &["al", "query", "labels_per_class"]).is_some(),
        };
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        let explicit = cfg.apply_overrides(overrides, explicit)?;
        cfg.resolve(&explicit)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        // Dataset paths are relative to the configuration file.
        if let Some(p) = cfg.dataset.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn apply_overrides(&mut self, o: &Overrides, mut explicit: Explicit) -> Result<Explicit> {
        if let Some(raw) = &o.dataset {
            let (path, synthetic) = DatasetSpec::parse_source(raw)?;
            self.dataset.path = path;
            self.dataset.synthetic = synthetic;
            self.dataset.format = None;
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if o.protocol == Protocol::Paper {
            let name = self.dataset.label();
            self.dataset.initial_labeled = 0;
            if name.to_ascii_lowercase().contains("pneumonia") {
                self.train.optimizer = OptimizerKind::Adam;
                self.train.learning_rate = 1e-4;
            } else {
                self.train.optimizer = OptimizerKind::Sgd;
                self.train.learning_rate = 0.1;
            }
            if self.variant.uses_loop() {
                let al = self.al.get_or_insert_with(AlConfig::default);
                al.rounds = 16;
                al.query.size = 250;
                al.label_cap = Some(4000);
                if self.variant == Variant::Equal {
                    if let Some((cap, per_class)) = equal_class_preset(&name) {
                        al.label_cap = Some(cap);
                        al.query.labels_per_class = per_class;
                        al.rounds = cap;
                        explicit.labels_per_class = true;
                    }
                }
            }
        }
        if let Some(acc) = o.stop_accuracy {
            if !self.variant.uses_loop() {
                return Err(HarnessError::config("--stop-when needs an active-learning variant"));
            }
            self.al.get_or_insert_with(AlConfig::default).stop_accuracy = Some(acc);
        }
        Ok(explicit)
    }

    /// Checks variant consistency and fills in variant-implied settings.
    fn resolve(&mut self, explicit: &Explicit) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::config("at least one seed is required"));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(HarnessError::config("seeds must be distinct"));
        }
        if !(0.0..1.0).contains(&self.dataset.eval_fraction) {
            return Err(HarnessError::config("eval_fraction must lie in [0, 1)"));
        }
        if self.dataset.path.is_some() == self.dataset.synthetic.is_some() {
            return Err(HarnessError::config("dataset needs exactly one of `path` or `synthetic`"));
        }

        let softmax_only = matches!(self.variant, Variant::Baseline | Variant::Active);
        if softmax_only {
            if explicit.gen_weight.is_some_and(|w| w > 0.0) {
                return Err(HarnessError::config(format!(
                    "variant {} trains the softmax classifier only; gen_weight must be 0",
                    self.variant.name()
                )));
            }
            if self.sgld.is_some() {
                return Err(HarnessError::config(format!(
                    "variant {} runs no sampler; remove the [sgld] section",
                    self.variant.name()
                )));
            }
            self.train.gen_weight = 0.0;
        } else {
            if !(self.train.gen_weight > 0.0) {
                return Err(HarnessError::config(format!(
                    "variant {} needs gen_weight > 0",
                    self.variant.name()
                )));
            }
            self.sgld.get_or_insert_with(SgldConfig::default).validate()?;
        }
        self.train.validate()?;

        match self.variant {
            Variant::Baseline => {
                if self.al.is_some() {
                    return Err(HarnessError::config(
                        "baseline trains once on the full training set and takes no [al] settings",
                    ));
                }
                if self.oracle.kind != OracleKind::Simulated {
                    return Err(HarnessError::config("baseline has no oracle"));
                }
            }
            Variant::Active | Variant::Calico => {
                let al = self.al.get_or_insert_with(AlConfig::default);
                if al.query.strategy == Strategy::EqualClass {
                    return Err(HarnessError::config("per-class quotas are the `equal` variant"));
                }
            }
            Variant::Equal => {
                if explicit.strategy.as_deref().is_some_and(|s| s != "equal_class") {
                    return Err(HarnessError::config("variant equal always uses the equal_class strategy"));
                }
                if !explicit.labels_per_class {
                    return Err(HarnessError::config("variant equal needs al.query.labels_per_class"));
                }
                if self.oracle.kind != OracleKind::Simulated {
                    return Err(HarnessError::config(
                        "variant equal reads ground truth and cannot run against a remote oracle",
                    ));
                }
                let al = self.al.get_or_insert_with(AlConfig::default);
                al.query.strategy = Strategy::EqualClass;
            }
        }
        if let Some(al) = &self.al {
            al.query.validate()?;
            if al.rounds < 1 {
                return Err(HarnessError::config("al.rounds must be at least 1"));
            }
        }
        Ok(())
    }

    /// Where the experiment writes its artifacts.
    pub fn output_dir(&self) -> PathBuf {
        let out = self
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name));
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        }
    }

    /// JSON snapshot stored with every run.
    pub fn snapshot(&self, seed: u64) -> Result<serde_json::Value> {
        let mut value = serde_json::to_value(self)?;
        value["seed"] = seed.into();
        Ok(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
