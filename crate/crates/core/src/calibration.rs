//! Expected calibration error, reliability tables and temperature scaling.
//!
//! Bins are equal-width half-open intervals `((m-1)/M, m/M]`. A confidence
//! that lands exactly on a right endpoint belongs to that bin.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{confidence, log_density_unnorm, posterior, ModelState};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub accuracy: f64,
    /// Zero for empty bins.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_bins: usize,
    pub bins: Vec<Bin>,
    pub ece: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Right endpoint `m / M` of bin `m` (1-based).
pub fn bin_edge(m: usize, n_bins: usize) -> f64 {
    m as f64 / n_bins as f64
}

/// 1-based bin index of a confidence in (0, 1].
pub fn bin_index(conf: f64, n_bins: usize) -> usize {
    let mut m = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins);
    // `conf * M` can round across an integer; settle against the edges.
    while m > 1 && conf <= bin_edge(m - 1, n_bins) {
        m -= 1;
    }
    while m < n_bins && conf > bin_edge(m, n_bins) {
        m += 1;
    }
    m
}

pub fn compute_ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::validation(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::validation("cannot compute ECE of an empty prediction set"));
    }
    if n_bins == 0 {
        return Err(Error::validation("need at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::validation(format!("confidence {c} outside (0, 1]")));
    }

    let mut counts = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sums = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let m = bin_index(c, n_bins) - 1;
        counts[m] += 1;
        hits[m] += usize::from(ok);
        conf_sums[m] += c;
    }

    let n = confidences.len();
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|m| {
            let (accuracy, confidence) = if counts[m] == 0 {
                (0.0, 0.0)
            } else {
                let c = counts[m] as f64;
                (hits[m] as f64 / c, conf_sums[m] / c)
            };
            ece += counts[m] as f64 / n as f64 * (accuracy - confidence).abs();
            Bin {
                lower: bin_edge(m, n_bins),
                upper: bin_edge(m + 1, n_bins),
                count: counts[m],
                accuracy,
                confidence,
            }
        })
        .collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    Ok(CalibrationReport {
        n_bins,
        bins,
        ece,
        accuracy,
        n,
    })
}

/// Per-sample prediction on an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub predicted: usize,
    pub confidence: f64,
    pub label: usize,
}

pub fn predict(state: &ModelState, dataset: &Dataset, ids: &[usize]) -> Result<Vec<Prediction>> {
    ids.iter()
        .map(|&id| {
            let probs = posterior(&state.logits(dataset.sample(id))?);
            let (conf, predicted) = confidence(&probs);
            Ok(Prediction {
                id,
                predicted,
                confidence: conf,
                label: dataset.label(id),
            })
        })
        .collect()
}

pub fn evaluate_model(
    state: &ModelState,
    dataset: &Dataset,
    eval_ids: &[usize],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if eval_ids.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let preds = predict(state, dataset, eval_ids)?;
    let confs: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    let correct: Vec<bool> = preds.iter().map(|p| p.predicted == p.label).collect();
    compute_ece(&confs, &correct, n_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub midpoint: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub count: usize,
    /// `accuracy - confidence`; positive means under-confident.
    pub deviation: f64,
}

pub fn reliability_table(report: &CalibrationReport) -> Vec<ReliabilityRow> {
    report
        .bins
        .iter()
        .map(|b| ReliabilityRow {
            midpoint: 0.5 * (b.lower + b.upper),
            accuracy: b.accuracy,
            confidence: b.confidence,
            count: b.count,
            deviation: b.accuracy - b.confidence,
        })
        .collect()
}

impl CalibrationReport {
    /// One row per bin followed by a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,accuracy,confidence\n");
        for (m, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m + 1,
                b.lower,
                b.upper,
                b.count,
                b.accuracy,
                b.confidence
            );
        }
        let _ = writeln!(
            out,
            "summary,n_bins={},n={},accuracy={},ece={}",
            self.n_bins, self.n, self.accuracy, self.ece
        );
        out
    }
}

fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let scaled: Vec<f64> = l.iter().map(|v| v / temperature).collect();
            log_density_unnorm(&scaled) - scaled[y]
        })
        .sum();
    total / logits.len() as f64
}

/// Fits the softmax temperature minimising held-out NLL, by golden-section
/// search over `log T` in [-3, 3].
pub fn temperature_scale(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::validation("need one label per logit vector on a non-empty set"));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::validation("held-out set contains a single class"));
    }
    if let Some(&y) = labels.iter().zip(logits).find(|(y, l)| **y >= l.len()).map(|(y, _)| y) {
        return Err(Error::validation(format!("label {} outside the logit range", y + 1)));
    }

    const TOL: f64 = 1e-4;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |log_t: f64| nll_at_temperature(logits, labels, log_t.exp());
    let (mut a, mut b) = (-3.0f64, 3.0f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// Logits divided by `temperature`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    logits.iter().map(|l| l / temperature).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_has_zero_ece() {
        let r = compute_ece(&[1.0; 5], &[true; 5], 15).unwrap();
        assert_eq!(r.ece, 0.0);
        assert!(reliability_table(&r).iter().all(|row| row.deviation == 0.0));
    }

    #[test]
    fn hand_enumerated_case() {
        let r = compute_ece(&[0.55, 0.65, 0.85, 0.95], &[false, true, true, true], 10).unwrap();
        assert!((r.ece - 0.275).abs() < 1e-15, "{}", r.ece);
        let occupied: Vec<f64> = reliability_table(&r)
            .into_iter()
            .filter(|row| row.count > 0)
            .map(|row| row.deviation)
            .collect();
        let expected = [-0.55, 0.35, 0.15, 0.05];
        for (got, want) in occupied.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(reliability_table(&r).len(), 10);
    }

    #[test]
    fn single_bin_reduces_to_global_gap() {
        let confs = [0.9, 0.6, 0.7, 0.3];
        let correct = [true, false, true, true];
        let r = compute_ece(&confs, &correct, 1).unwrap();
        let mean_conf = confs.iter().sum::<f64>() / 4.0;
        assert!((r.ece - (0.75 - mean_conf).abs()).abs() < 1e-15);
    }

    #[test]
    fn right_endpoints_belong_to_their_bin() {
        for m in 1..=10 {
            assert_eq!(bin_index(bin_edge(m, 10), 10), m);
        }
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.30000000000000004, 10), 4);
        assert_eq!(bin_index(1e-300, 15), 1);
    }

    #[test]
    fn one_sample_one_bin() {
        let r = compute_ece(&[0.8], &[true], 10).unwrap();
        assert!((r.ece - 0.2).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        assert!(compute_ece(&[0.5], &[true, false], 10).is_err());
        assert!(compute_ece(&[], &[], 10).is_err());
        assert!(compute_ece(&[0.0], &[true], 10).is_err());
        assert!(compute_ece(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn csv_has_summary_row() {
        let r = compute_ece(&[0.55, 0.95], &[false, true], 10).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.lines().last().unwrap().starts_with("summary,n_bins=10"));
    }

    #[test]
    fn temperature_rejects_single_class() {
        let logits = vec![vec![1.0, 0.0]; 4];
        assert!(temperature_scale(&logits, &[0, 0, 0, 0]).is_err());
    }
}
