//! Dataset ingestion, synthetic generation and pool partitioning.
//!
//! Class labels are 0-based in memory. Documents (CSV files, reports) carry
//! 1-based labels; conversion happens only at those boundaries.
//!
//! ## Array-archive directory layout
//!
//! ```text
//! <dir>/meta.txt      key = value lines (see below)
//! <dir>/features.bin  N x D little-endian values, `dtype` = u8 | f64
//! <dir>/labels.bin    N little-endian u32 class indices, 0-based
//! ```
//!
//! `meta.txt` keys: `name`, `classes`, `count`, `dtype`, and either
//! `shape = H,W,C` (images, stored row-major HWC) or `dim = D`. Optional
//! `splits = train:T,val:V,test:S` tags samples in storage order.
//! `u8` features are raw pixels and are mapped to [-1, 1] by `x / 127.5 - 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Spatial layout of image features, stored row-major as height x width x channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Directory with `meta.txt` plus raw binary tensors.
    Archive,
    /// Comma separated `x1,..,xD,label` rows with 1-based labels.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Row-major `len() x dim` feature matrix.
    pub features: Vec<f64>,
    pub dim: usize,
    pub image: Option<ImageShape>,
    /// 0-based class index per sample.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, id: usize) -> &[f64] {
        &self.features[id * self.dim..(id + 1) * self.dim]
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn ids_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.splits.contains(&split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "dataset `{}` needs at least 2 classes, got {}",
                self.name, self.num_classes
            )));
        }
        if self.features.len() != self.len() * self.dim {
            return Err(Error::validation(format!(
                "feature matrix has {} values, expected {} x {}",
                self.features.len(),
                self.len(),
                self.dim
            )));
        }
        if self.splits.len() != self.len() {
            return Err(Error::validation("split tags do not cover every sample"));
        }
        if let Some(shape) = self.image {
            if shape.len() != self.dim {
                return Err(Error::validation(format!(
                    "image shape {}x{}x{} does not match feature dim {}",
                    shape.height, shape.width, shape.channels, self.dim
                )));
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::validation(format!(
                "label {} outside 1..={}",
                y + 1,
                self.num_classes
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature in sample {}",
                i / self.dim.max(1)
            )));
        }
        Ok(())
    }
}

/// Maps a raw 8-bit pixel to [-1, 1].
pub fn normalize_pixel(raw: u8) -> f64 {
    f64::from(raw) / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounding to the nearest level.
pub fn denormalize_pixel(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Clamps already-normalised features into [-1, 1]. A fixed point on
/// normalised data, so applying it twice is the same as once.
pub fn renormalize(features: &mut [f64]) {
    for v in features {
        *v = v.clamp(-1.0, 1.0);
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::Archive => load_archive(path),
        DatasetFormat::Csv => load_csv(path),
    }
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format("meta.txt", format!("line {} is not `key = value`", lineno + 1))
        })?;
        meta.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(meta)
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::format(key, "missing from meta.txt"))?;
    raw.parse()
        .map_err(|_| Error::format(key, format!("`{raw}` is not a non-negative integer")))
}

fn parse_splits(raw: &str, count: usize) -> Result<Vec<Split>> {
    let mut tags = Vec::with_capacity(count);
    for part in raw.split(',') {
        let (name, n) = part
            .split_once(':')
            .ok_or_else(|| Error::format("splits", format!("`{part}` is not `name:count`")))?;
        let split = match name.trim() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::format("splits", format!("unknown split `{other}`"))),
        };
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::format("splits", format!("bad count in `{part}`")))?;
        tags.extend(std::iter::repeat_n(split, n));
    }
    if tags.len() != count {
        return Err(Error::validation(format!(
            "split sizes sum to {}, expected {count}",
            tags.len()
        )));
    }
    Ok(tags)
}

fn load_archive(dir: &Path) -> Result<Dataset> {
    let meta = parse_meta(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let name = meta
        .get("name")
        .cloned()
        .unwrap_or_else(|| dir.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into()));
    let num_classes = meta_usize(&meta, "classes")?;
    let count = meta_usize(&meta, "count")?;

    let image = match meta.get("shape") {
        Some(raw) => {
            let dims: Vec<usize> = raw
                .split(',')
                .map(|d| d.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("shape", format!("`{raw}` is not H,W,C")))?;
            match dims.as_slice() {
                [h, w, c] => Some(ImageShape { height: *h, width: *w, channels: *c }),
                [h, w] => Some(ImageShape { height: *h, width: *w, channels: 1 }),
                _ => return Err(Error::format("shape", format!("`{raw}` is not H,W,C"))),
            }
        }
        None => None,
    };
    let dim = match image {
        Some(shape) => shape.len(),
        None => meta_usize(&meta, "dim")?,
    };

    let raw_features = fs::read(dir.join("features.bin"))?;
    let dtype = meta.get("dtype").map_or("u8", String::as_str);
    let features: Vec<f64> = match dtype {
        "u8" => {
            if raw_features.len() != count * dim {
                return Err(Error::format(
                    "features.bin",
                    format!("{} bytes, expected {count} x {dim}", raw_features.len()),
                ));
            }
            raw_features.iter().map(|&b| normalize_pixel(b)).collect()
        }
        "f64" => {
            if raw_features.len() != count * dim * 8 {
                return Err(Error::format(
                    "features.bin",
                    format!("{} bytes, expected {count} x {dim} x 8", raw_features.len()),
                ));
            }
            raw_features
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
        other => return Err(Error::format("dtype", format!("unsupported dtype `{other}`"))),
    };

    let raw_labels = fs::read(dir.join("labels.bin"))?;
    if raw_labels.len() % 4 != 0 {
        return Err(Error::format("labels.bin", "length is not a multiple of 4"));
    }
    let labels: Vec<usize> = raw_labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    if labels.len() != count {
        return Err(Error::validation(format!(
            "label array has {} entries but there are {count} images",
            labels.len()
        )));
    }

    let splits = match meta.get("splits") {
        Some(raw) => parse_splits(raw, count)?,
        None => vec![Split::Train; count],
    };

    let dataset = Dataset {
        name,
        features,
        dim,
        image,
        labels,
        num_classes,
        splits,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `dataset` in the array-archive layout. Image datasets are stored as
/// raw u8 pixels, everything else as f64.
pub fn save_archive(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = format!(
        "name = {}\nclasses = {}\ncount = {}\n",
        dataset.name,
        dataset.num_classes,
        dataset.len()
    );
    let features: Vec<u8> = match dataset.image {
        Some(shape) => {
            meta.push_str(&format!(
                "shape = {},{},{}\ndtype = u8\n",
                shape.height, shape.width, shape.channels
            ));
            dataset.features.iter().map(|&v| denormalize_pixel(v)).collect()
        }
        None => {
            meta.push_str(&format!("dim = {}\ndtype = f64\n", dataset.dim));
            dataset.features.iter().flat_map(|v| v.to_le_bytes()).collect()
        }
    };
    // Storage order must keep each split contiguous for the `splits` key.
    let mut runs: Vec<(Split, usize)> = Vec::new();
    for &s in &dataset.splits {
        match runs.last_mut() {
            Some((last, n)) if *last == s => *n += 1,
            _ => runs.push((s, 1)),
        }
    }
    let distinct: BTreeSet<_> = runs.iter().map(|(s, _)| format!("{s:?}")).collect();
    if distinct.len() != runs.len() {
        return Err(Error::validation("splits must be contiguous to be saved"));
    }
    let splits = runs
        .iter()
        .map(|(s, n)| {
            let name = match s {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            format!("{name}:{n}")
        })
        .collect::<Vec<_>>()
        .join(",");
    if !splits.is_empty() {
        meta.push_str(&format!("splits = {splits}\n"));
    }

    fs::write(dir.join("meta.txt"), meta)?;
    fs::write(dir.join("features.bin"), features)?;
    let labels: Vec<u8> = dataset
        .labels
        .iter()
        .flat_map(|&y| (y as u32).to_le_bytes())
        .collect();
    fs::write(dir.join("labels.bin"), labels)?;
    Ok(())
}

/// Reads `x1,..,xD,label` rows. Labels are 1-based. A leading
/// `# classes = K` comment declares K; otherwise K is the largest label seen.
fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut declared: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    let mut first_row = true;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "classes" {
                    declared = Some(value.trim().parse().map_err(|_| {
                        Error::format("classes", format!("`{}` is not an integer", value.trim()))
                    })?);
                }
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if std::mem::take(&mut first_row) && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            continue; // header
        }
        if cells.len() < 2 {
            return Err(Error::format("row", format!("line {} has fewer than 2 columns", lineno + 1)));
        }
        let d = cells.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::format(
                    "row",
                    format!("line {} has {d} features, expected {prev}", lineno + 1),
                ))
            }
            _ => {}
        }
        for cell in &cells[..d] {
            features.push(cell.parse::<f64>().map_err(|_| {
                Error::format("feature", format!("line {}: `{cell}` is not a number", lineno + 1))
            })?);
        }
        let raw_label: usize = cells[d].parse().map_err(|_| {
            Error::format("label", format!("line {}: `{}` is not an integer", lineno + 1, cells[d]))
        })?;
        if raw_label == 0 {
            return Err(Error::validation(format!(
                "line {}: labels are 1-based, got 0",
                lineno + 1
            )));
        }
        labels.push(raw_label - 1);
    }

    let num_classes = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    let dataset = Dataset {
        name: path
            .file_stem()
            .map_or("csv".into(), |s| s.to_string_lossy().into()),
        features,
        dim: dim.unwrap_or(0),
        image: None,
        labels,
        num_classes,
        splits: vec![Split::Train; n],
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset as CSV with 1-based labels.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "# classes = {}", dataset.num_classes)?;
    let header: Vec<String> = (1..=dataset.dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for id in 0..dataset.len() {
        let row: Vec<String> = dataset.sample(id).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{},{}", row.join(","), dataset.label(id) + 1)?;
    }
    Ok(())
}

/// Per-class Gaussian clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub means: Vec<Vec<f64>>,
    /// Row-major D x D covariance per class.
    pub covariances: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Isotropic 2-D clouds with means evenly spaced on the unit circle.
    pub fn unit_circle(classes: usize, per_class: usize, sigma: f64, seed: u64) -> Self {
        let means = (0..classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                vec![angle.cos(), angle.sin()]
            })
            .collect();
        let var = sigma * sigma;
        SyntheticSpec {
            classes,
            per_class,
            means,
            covariances: vec![vec![var, 0.0, 0.0, var]; classes],
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(2, Vec::len)
    }
}

/// Lower-triangular Cholesky factor, or `None` when `cov` is not positive-definite.
fn cholesky(cov: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = cov[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::validation("synthetic data needs at least 2 classes"));
    }
    if spec.means.len() != spec.classes || spec.covariances.len() != spec.classes {
        return Err(Error::validation("need one mean and one covariance per class"));
    }
    let d = spec.dim();
    let mut factors = Vec::with_capacity(spec.classes);
    for (k, (mean, cov)) in spec.means.iter().zip(&spec.covariances).enumerate() {
        if mean.len() != d || cov.len() != d * d {
            return Err(Error::validation(format!("class {} has inconsistent dimensions", k + 1)));
        }
        let symmetric = (0..d).all(|i| (0..d).all(|j| (cov[i * d + j] - cov[j * d + i]).abs() < 1e-12));
        let factor = cholesky(cov, d).filter(|_| symmetric).ok_or_else(|| {
            Error::validation(format!("covariance of class {} is not positive-definite", k + 1))
        })?;
        factors.push(factor);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for k in 0..spec.classes {
        for _ in 0..spec.per_class {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            for i in 0..d {
                let shift: f64 = (0..=i).map(|j| factors[k][i * d + j] * z[j]).sum();
                features.push(spec.means[k][i] + shift);
            }
            labels.push(k);
        }
    }

    Ok(Dataset {
        name: format!("synthetic-{}x{}", spec.classes, spec.per_class),
        features,
        dim: d,
        image: None,
        labels,
        num_classes: spec.classes,
        splits: vec![Split::Train; n],
    })
}

/// Disjoint labeled / unlabeled / evaluation index sets.
///
/// Labeled entries carry the label supplied by the oracle, which for
/// simulated runs is the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPartition {
    pub labeled: BTreeMap<usize, usize>,
    pub unlabeled: BTreeSet<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
}

impl PoolPartition {
    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.keys().copied().collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// Sorted ids of labeled and unlabeled samples together.
    pub fn training_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.labeled.keys().chain(self.unlabeled.iter()).copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn check_invariants(&self) -> Result<()> {
        if let Some(id) = self.labeled.keys().find(|id| self.unlabeled.contains(id)) {
            return Err(Error::validation(format!("sample {id} is both labeled and unlabeled")));
        }
        let eval: BTreeSet<usize> = self.eval.iter().copied().collect();
        if eval.len() != self.eval.len() {
            return Err(Error::validation("evaluation set has duplicate ids"));
        }
        if let Some(id) = eval
            .iter()
            .find(|id| self.labeled.contains_key(id) || self.unlabeled.contains(id))
        {
            return Err(Error::validation(format!("evaluation sample {id} leaks into the pools")));
        }
        Ok(())
    }
}

/// Draws the evaluation set (from the test split when present, else from
/// everything) and the initial labeled pool, uniformly without replacement.
pub fn split_pools(
    dataset: &Dataset,
    initial_labeled: usize,
    eval_fraction: f64,
    seed: u64,
) -> Result<PoolPartition> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::validation(format!("eval_fraction {eval_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut eval_candidates, mut train) = if dataset.has_split(Split::Test) {
        (dataset.ids_in(Split::Test), dataset.ids_in(Split::Train))
    } else {
        ((0..dataset.len()).collect::<Vec<_>>(), Vec::new())
    };
    let eval_size = (eval_fraction * eval_candidates.len() as f64).round() as usize;
    eval_candidates.shuffle(&mut rng);
    let eval: Vec<usize> = eval_candidates[..eval_size].to_vec();
    if !dataset.has_split(Split::Test) {
        train = eval_candidates[eval_size..].to_vec();
    }
    if initial_labeled > train.len() {
        return Err(Error::validation(format!(
            "initial_labeled {initial_labeled} exceeds the {} available training samples",
            train.len()
        )));
    }
    train.shuffle(&mut rng);
    let labeled = train[..initial_labeled]
        .iter()
        .map(|&id| (id, dataset.label(id)))
        .collect();
    let unlabeled = train[initial_labeled..].iter().copied().collect();
    let mut eval = eval;
    eval.sort_unstable();
    let pools = PoolPartition {
        labeled,
        unlabeled,
        eval,
        seed,
    };
    pools.check_invariants()?;
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        make_synthetic(&SyntheticSpec::unit_circle(3, 10, 0.2, 1)).unwrap()
    }

    #[test]
    fn pixel_normalisation_endpoints() {
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(0), -1.0);
        for raw in 0..=255u8 {
            assert_eq!(denormalize_pixel(normalize_pixel(raw)), raw);
        }
    }

    #[test]
    fn renormalize_is_idempotent() {
        let mut once: Vec<f64> = (0..=255u8).map(normalize_pixel).collect();
        once.push(1.3);
        renormalize(&mut once);
        let mut twice = once.clone();
        renormalize(&mut twice);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn archive_with_images() {
        let dir = tempfile::tempdir().unwrap();
        let n = 100;
        let pixels: Vec<u8> = (0..n * 784).map(|i| (i % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).flat_map(|i| ((i % 8) as u32).to_le_bytes()).collect();
        fs::write(
            dir.path().join("meta.txt"),
            "name = blood\nclasses = 8\ncount = 100\nshape = 28,28,1\ndtype = u8\n",
        )
        .unwrap();
        fs::write(dir.path().join("features.bin"), pixels).unwrap();
        fs::write(dir.path().join("labels.bin"), labels).unwrap();

        let ds = load_dataset(dir.path(), DatasetFormat::Archive).unwrap();
        assert_eq!((ds.dim, ds.num_classes, ds.len()), (784, 8, 100));
        assert_eq!(ds.features[0], -1.0);
        assert_eq!(ds.features[255], 1.0);
        assert!(ds.features.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn archive_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("meta.txt"), "classes = 2\ncount = 3\ndim = 1\ndtype = u8\n").unwrap();
        fs::write(dir.path().join("features.bin"), [0u8, 1, 2]).unwrap();
        fs::write(dir.path().join("labels.bin"), [0u8; 8]).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::Archive).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn archive_label_outside_k() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("meta.txt"), "classes = 2\ncount = 2\ndim = 1\n").unwrap();
        fs::write(dir.path().join("features.bin"), [0u8, 1]).unwrap();
        let labels: Vec<u8> = [0u32, 2].iter().flat_map(|y| y.to_le_bytes()).collect();
        fs::write(dir.path().join("labels.bin"), labels).unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::Archive).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn archive_malformed_meta_names_field() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("meta.txt"), "classes = many\ncount = 2\ndim = 1\n").unwrap();
        match load_dataset(dir.path(), DatasetFormat::Archive).unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "classes"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn archive_and_csv_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_archive(&ds, &dir.path().join("arch")).unwrap();
        let back = load_dataset(&dir.path().join("arch"), DatasetFormat::Archive).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);

        let csv = dir.path().join("tiny.csv");
        save_csv(&ds, &csv).unwrap();
        let back = load_dataset(&csv, DatasetFormat::Csv).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, 3);
    }

    #[test]
    fn csv_rejects_zero_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "0.1,0.2,1\n0.3,0.4,0\n").unwrap();
        assert!(matches!(load_dataset(&path, DatasetFormat::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::unit_circle(3, 50, 0.3, 9);
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.dim, 2);
    }

    #[test]
    fn synthetic_empty_classes_keep_k() {
        let ds = make_synthetic(&SyntheticSpec::unit_circle(4, 0, 0.3, 9)).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes, 4);
    }

    #[test]
    fn synthetic_rejects_indefinite_covariance() {
        let mut spec = SyntheticSpec::unit_circle(2, 5, 0.3, 1);
        spec.covariances[1] = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(make_synthetic(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn split_sizes() {
        let spec = SyntheticSpec::unit_circle(4, 250, 0.3, 3);
        let ds = make_synthetic(&spec).unwrap();
        let pools = split_pools(&ds, 50, 0.2, 11).unwrap();
        assert_eq!(pools.labeled.len(), 50);
        assert_eq!(pools.unlabeled.len(), 750);
        assert_eq!(pools.eval.len(), 200);
        pools.check_invariants().unwrap();
        assert_eq!(pools, split_pools(&ds, 50, 0.2, 11).unwrap());
        for (&id, &y) in &pools.labeled {
            assert_eq!(ds.label(id), y);
        }
    }

    #[test]
    fn split_cold_start_and_overflow() {
        let ds = tiny();
        let pools = split_pools(&ds, 0, 0.2, 1).unwrap();
        assert!(pools.labeled.is_empty());
        assert_eq!(pools.unlabeled.len(), 24);
        assert!(matches!(split_pools(&ds, 25, 0.2, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn split_uses_test_split_for_eval() {
        let mut ds = tiny();
        for i in 20..30 {
            ds.splits[i] = Split::Test;
        }
        let pools = split_pools(&ds, 5, 0.2, 4).unwrap();
        assert_eq!(pools.eval.len(), 2);
        assert!(pools.eval.iter().all(|&i| i >= 20));
        assert_eq!(pools.labeled.len() + pools.unlabeled.len(), 20);
    }
}
