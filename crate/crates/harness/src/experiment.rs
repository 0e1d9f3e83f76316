//! Runs one experiment configuration over all of its seeds.
//!
//! Layout of the output directory:
//!
//! ```text
//! experiment.toml, experiment.json   resolved configuration
//! seed-<s>/                          one run directory per seed
//! failures.json                      seeds that did not finish
//! curves.csv, summary.csv            aggregated tables
//! reliability/seed-<s>.{csv,svg}     reliability data of each final model
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use calico_core::calibration::evaluate_model;
use calico_core::data::{split_pools, Dataset, PoolPartition};
use calico_core::model::ModelState;
use calico_core::orchestrator::{
    round_rng, run_al, AlSetup, Oracle, RoundRecord, RunDir, RunLog, RunStatus, SimulatedOracle,
};
use calico_core::trainer::train_baseline;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub runs: Vec<(u64, RunLog)>,
    pub failures: Vec<SeedFailure>,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Dataset, pools and initial model of one seed.
pub struct Prepared {
    pub dataset: Dataset,
    pub pools: PoolPartition,
    pub model: ModelState,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let dataset = cfg.dataset.load(seed, Path::new("."))?;
    let initial = if cfg.variant.uses_loop() { cfg.dataset.initial_labeled } else { 0 };
    let mut pools = split_pools(&dataset, initial, cfg.dataset.eval_fraction, seed)?;
    if !cfg.variant.uses_loop() {
        // The baseline sees every training label at once.
        let ids: Vec<usize> = pools.unlabeled.iter().copied().collect();
        for id in ids {
            pools.unlabeled.remove(&id);
            pools.labeled.insert(id, dataset.label(id));
        }
    }
    if pools.eval.is_empty() {
        return Err(HarnessError::config("the evaluation set is empty; raise eval_fraction"));
    }
    let model = ModelState::init(cfg.model.arch_for(&dataset)?, seed);
    Ok(Prepared { dataset, pools, model })
}

/// Writes the resolved configuration next to the runs.
pub fn write_experiment_header(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("experiment.toml"), cfg.to_toml()?)?;
    fs::write(dir.join("experiment.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn run_baseline(cfg: &ExperimentConfig, seed: u64, prep: &Prepared, store: &RunDir) -> Result<RunLog> {
    if !store.rounds()?.is_empty() {
        return Ok(store.load_log()?);
    }
    let mut log = RunLog {
        seed,
        config: cfg.snapshot(seed)?,
        initial: None,
        rounds: Vec::new(),
        status: RunStatus::Running,
    };
    let started = Instant::now();
    let mut rng = round_rng(seed, 1);
    match train_baseline(&prep.model, &prep.pools.labeled, &prep.dataset, &cfg.train, &mut rng) {
        Ok((model, metrics)) => {
            let report = evaluate_model(&model, &prep.dataset, &prep.pools.eval, report::n_bins(cfg))?;
            let record = RoundRecord {
                round: 1,
                labeled_train: prep.pools.labeled.len(),
                labeled: prep.pools.labeled.len(),
                unlabeled: 0,
                queried: Vec::new(),
                report,
                metrics,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            store.save_round(&record, &model, &prep.pools)?;
            store.save_final(&model)?;
            log.rounds.push(record);
            log.status = RunStatus::Completed;
        }
        Err(calico_core::Error::Numeric(msg)) => log.status = RunStatus::Failed(msg),
        Err(e) => return Err(e.into()),
    }
    store.write_log(&log)?;
    Ok(log)
}

/// Runs (or resumes) one prepared seed against `oracle`, persisting into `dir`.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    prep: &Prepared,
    oracle: &mut dyn Oracle,
) -> Result<RunLog> {
    let store = RunDir::create(dir, &cfg.snapshot(seed)?)?;
    if !cfg.variant.uses_loop() {
        return run_baseline(cfg, seed, prep, &store);
    }
    let al = cfg.al.clone().ok_or_else(|| HarnessError::config("missing [al] settings"))?;
    let setup = AlSetup {
        dataset: &prep.dataset,
        pools: prep.pools.clone(),
        model: prep.model.clone(),
        train: cfg.train.clone(),
        sgld: cfg.sgld.clone().unwrap_or_default(),
        al,
        seed,
        snapshot: cfg.snapshot(seed)?,
    };
    Ok(run_al(setup, oracle, Some(&store))?.log)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunLog> {
    let prep = prepare(cfg, seed)?;
    let mut oracle = SimulatedOracle::new(&prep.dataset);
    run_prepared(cfg, seed, dir, &prep, &mut oracle)
}

/// Runs every seed; a failing seed is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_in(cfg, &cfg.output_dir())
}

pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    if cfg.oracle.kind != calico_core::orchestrator::OracleKind::Simulated {
        return Err(HarnessError::config("remote-oracle runs are started with `calico serve`"));
    }
    write_experiment_header(cfg, dir)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, &seed_dir(dir, seed)) {
            Ok(log) => {
                if let RunStatus::Failed(reason) = &log.status {
                    failures.push(SeedFailure { seed, reason: reason.clone() });
                }
                runs.push((seed, log));
            }
            Err(e) => failures.push(SeedFailure { seed, reason: e.to_string() }),
        }
    }
    fs::write(dir.join("failures.json"), serde_json::to_vec_pretty(&failures)?)?;
    report::emit(dir)?;
    Ok(ExperimentOutcome { dir: dir.to_path_buf(), runs, failures })
}

/// Final accuracy and ECE per seed, keyed by seed.
pub fn final_metrics(runs: &[(u64, RunLog)]) -> BTreeMap<u64, (f64, f64)> {
    runs.iter()
        .filter_map(|(seed, log)| log.rounds.last().map(|r| (*seed, (r.report.accuracy, r.report.ece))))
        .collect()
}
