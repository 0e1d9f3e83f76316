//! Tables and figures derived from stored run logs.
//!
//! Everything here reads only what the runs persisted, so emitting twice
//! over the same directory produces identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use calico_core::calibration::{CalibrationReport, DEFAULT_BINS};
use calico_core::orchestrator::{RunDir, RunLog, RunStatus};
use serde::Serialize;

use crate::config::{ExperimentConfig, Variant};
use crate::error::{HarnessError, Result};

pub fn n_bins(cfg: &ExperimentConfig) -> usize {
    cfg.al.as_ref().map_or(DEFAULT_BINS, |al| al.n_bins)
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, sd }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundPoint {
    pub round: usize,
    pub accuracy: f64,
    pub ece: f64,
}

/// The highest-accuracy round (earliest on ties) and the last round.
pub fn best_and_final(log: &RunLog) -> Option<(RoundPoint, RoundPoint)> {
    let point = |r: &calico_core::orchestrator::RoundRecord| RoundPoint {
        round: r.round,
        accuracy: r.report.accuracy,
        ece: r.report.ece,
    };
    let last = log.rounds.last()?;
    let mut best = &log.rounds[0];
    for r in &log.rounds[1..] {
        if r.report.accuracy > best.report.accuracy {
            best = r;
        }
    }
    Some((point(best), point(last)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: &'static str,
    pub runs: usize,
    pub accuracy: Stat,
    pub ece: Stat,
}

/// One experiment directory read back from disk.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Runs with at least one evaluated round, ordered by seed.
    pub runs: Vec<RunLog>,
}

impl Experiment {
    pub fn load(dir: &Path) -> Result<Experiment> {
        let header = dir.join("experiment.json");
        if !header.exists() {
            return Err(HarnessError::config(format!("{} holds no experiment", dir.display())));
        }
        let config: ExperimentConfig = serde_json::from_slice(&fs::read(header)?)?;
        let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let seed = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed-"))
                .and_then(|s| s.parse().ok());
            if let Some(seed) = seed {
                if path.join("config.json").exists() {
                    seeds.push((seed, path));
                }
            }
        }
        seeds.sort();
        let mut runs = Vec::new();
        for (_, path) in seeds {
            let log = RunDir::open(&path)?.load_log()?;
            if !log.rounds.is_empty() && !matches!(log.status, RunStatus::Failed(_)) {
                runs.push(log);
            }
        }
        Ok(Experiment { config, runs })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Mean and spread of accuracy and ECE at each labeled-set size.
    pub fn curve(&self) -> Vec<(usize, usize, Stat, Stat)> {
        let mut by_size: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for log in &self.runs {
            for r in &log.rounds {
                let e = by_size.entry(r.labeled_train).or_default();
                e.0.push(r.report.accuracy);
                e.1.push(r.report.ece);
            }
        }
        by_size
            .into_iter()
            .map(|(size, (acc, ece))| (size, acc.len(), Stat::of(&acc), Stat::of(&ece)))
            .collect()
    }

    /// "Best" and, for the looped variants, "Final" rows.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let points: Vec<(RoundPoint, RoundPoint)> = self.runs.iter().filter_map(best_and_final).collect();
        let row = |label, pick: fn(&(RoundPoint, RoundPoint)) -> RoundPoint| {
            let chosen: Vec<RoundPoint> = points.iter().map(pick).collect();
            SummaryRow {
                label,
                runs: chosen.len(),
                accuracy: Stat::of(&chosen.iter().map(|p| p.accuracy).collect::<Vec<_>>()),
                ece: Stat::of(&chosen.iter().map(|p| p.ece).collect::<Vec<_>>()),
            }
        };
        let mut rows = vec![row("Best", |p| p.0)];
        if self.variant().uses_loop() {
            rows.push(row("Final", |p| p.1));
        }
        rows
    }

    pub fn final_reports(&self) -> Vec<(u64, &CalibrationReport)> {
        self.runs
            .iter()
            .filter_map(|log| log.rounds.last().map(|r| (log.seed, &r.report)))
            .collect()
    }
}

pub fn curves_csv(exp: &Experiment) -> String {
    let mut out = String::from("labeled,runs,accuracy_mean,accuracy_sd,ece_mean,ece_sd\n");
    for (size, n, acc, ece) in exp.curve() {
        let _ = writeln!(
            out,
            "{size},{n},{},{},{},{}",
            pct(acc.mean),
            pct(acc.sd),
            pct(ece.mean),
            pct(ece.sd)
        );
    }
    out
}

pub fn summary_csv(exp: &Experiment) -> String {
    let mut out = String::from("variant,row,runs,accuracy_mean,accuracy_sd,ece_mean,ece_sd\n");
    for row in exp.summary() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            exp.variant().name(),
            row.label,
            row.runs,
            pct(row.accuracy.mean),
            pct(row.accuracy.sd),
            pct(row.ece.mean),
            pct(row.ece.sd)
        );
    }
    out
}

pub fn per_seed_csv(exp: &Experiment) -> String {
    let mut out =
        String::from("seed,status,best_round,best_accuracy,best_ece,final_round,final_accuracy,final_ece\n");
    for log in &exp.runs {
        if let Some((best, last)) = best_and_final(log) {
            let status = match &log.status {
                RunStatus::Running => "running",
                RunStatus::Completed => "completed",
                RunStatus::Exhausted => "exhausted",
                RunStatus::Stopped => "stopped",
                RunStatus::Failed(_) => "failed",
            };
            let _ = writeln!(
                out,
                "{},{status},{},{},{},{},{},{}",
                log.seed,
                best.round,
                pct(best.accuracy),
                pct(best.ece),
                last.round,
                pct(last.accuracy),
                pct(last.ece)
            );
        }
    }
    out
}

/// Reliability diagram as a standalone SVG: per-bin accuracy bars, the
/// mean confidence of each bin as a marker, and the identity diagonal.
pub fn reliability_svg(report: &CalibrationReport, title: &str) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let x = |v: f64| PAD + v * SIZE;
    let y = |v: f64| PAD + (1.0 - v) * SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}" font-family="sans-serif" font-size="11">"#,
        w = SIZE + 2.0 * PAD
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(0.5), PAD / 2.0, escape(title));
    for b in report.bins.iter().filter(|b| b.count > 0) {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="#1f3b63"/>"##,
            x(b.lower),
            y(b.accuracy),
            (b.upper - b.lower) * SIZE,
            b.accuracy * SIZE
        );
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#c44e52"/>"##,
            x((b.lower + b.upper) / 2.0),
            y(b.confidence)
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{},{} {},{} {},{}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#, x(v), y(0.0) + 14.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, x(0.0) - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#, x(0.5), y(0.0) + 30.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">accuracy</text>"#,
        y(0.5),
        y(0.5)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">ACC {}%  ECE {}%</text>"#,
        x(0.02),
        y(0.95),
        pct(report.accuracy),
        pct(report.ece)
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes curves.csv, summary.csv, per_seed.csv and the reliability files.
pub fn emit(dir: &Path) -> Result<Experiment> {
    let exp = Experiment::load(dir)?;
    if exp.variant().uses_loop() {
        fs::write(dir.join("curves.csv"), curves_csv(&exp))?;
    }
    fs::write(dir.join("summary.csv"), summary_csv(&exp))?;
    fs::write(dir.join("per_seed.csv"), per_seed_csv(&exp))?;
    let rel = dir.join("reliability");
    fs::create_dir_all(&rel)?;
    for (seed, report) in exp.final_reports() {
        fs::write(rel.join(format!("seed-{seed}.csv")), report.to_csv())?;
        let title = format!("{} / {} / seed {seed}", exp.config.name, exp.variant().name());
        fs::write(rel.join(format!("seed-{seed}.svg")), reliability_svg(report, &title))?;
    }
    Ok(exp)
}

/// Side-by-side comparison of several experiments.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub text: String,
    pub csv: String,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(HarnessError::config("nothing to compare"));
    }
    let exps: Vec<Experiment> = dirs.iter().map(|d| Experiment::load(d)).collect::<Result<_>>()?;
    let headers: Vec<String> = exps
        .iter()
        .map(|e| format!("{} ({})", e.variant().name(), e.config.name))
        .collect();
    let cell = |exp: &Experiment, label: &str| {
        exp.summary()
            .into_iter()
            .find(|r| r.label == label && r.runs > 0)
            .map_or_else(|| "-".to_string(), |r| format!("{} / {}", pct(r.accuracy.mean), pct(r.ece.mean)))
    };
    let rows: Vec<(&str, Vec<String>)> = ["Best", "Final"]
        .iter()
        .map(|&label| (label, exps.iter().map(|e| cell(e, label)).collect()))
        .collect();

    let first = "Best ACC / ECE".len().max("Final ACC / ECE".len());
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|(_, c)| c[i].len()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let mut text = format!("{:first$}", "");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(text, "  {h:>w$}");
    }
    text.push('\n');
    for (label, cells) in &rows {
        let _ = write!(text, "{:first$}", format!("{label} ACC / ECE"));
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(text, "  {c:>w$}");
        }
        text.push('\n');
    }

    let mut csv = String::from("experiment,variant,row,runs,accuracy_mean,accuracy_sd,ece_mean,ece_sd\n");
    for exp in &exps {
        for row in exp.summary() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                exp.config.name,
                exp.variant().name(),
                row.label,
                row.runs,
                pct(row.accuracy.mean),
                pct(row.accuracy.sd),
                pct(row.ece.mean),
                pct(row.ece.sd)
            );
        }
    }
    Ok(Comparison { text, csv })
}
