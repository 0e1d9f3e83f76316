//! The active-learning loop: train, query, annotate, update pools, evaluate.
//!
//! Each round draws its randomness from a ChaCha stream keyed by
//! `(seed, round)`, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would have.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{evaluate_model, CalibrationReport, DEFAULT_BINS};
use crate::data::{Dataset, PoolPartition};
use crate::model::ModelState;
use crate::query::{equal_class_query, least_confidence_query, random_query, QueryItem, QuerySpec, Strategy};
use crate::sgld::SgldConfig;
use crate::trainer::{train_round, RoundMetrics, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Simulated,
    Remote,
}

/// Configuration-level description of where labels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleBinding {
    /// Answers from the dataset's ground truth.
    Simulated,
    /// Answers arrive through the annotation service.
    Remote { endpoint: String, poll_interval_ms: u64 },
}

/// Label source consulted once per round.
///
/// `request` announces the query; `poll` returns whatever labels have
/// arrived since the previous poll. A simulated oracle answers everything
/// on the first poll; a remote one may answer in pieces.
pub trait Oracle {
    fn kind(&self) -> OracleKind;

    /// Ground-truth labels, available only in simulation.
    fn ground_truth(&self) -> Option<&[usize]> {
        None
    }

    fn request(&mut self, round: usize, items: &[QueryItem]) -> Result<()>;

    fn poll(&mut self) -> Result<Vec<(usize, usize)>>;

    fn poll_interval(&self) -> Duration {
        Duration::ZERO
    }
}

pub struct SimulatedOracle {
    truth: Vec<usize>,
    pending: Vec<usize>,
}

impl SimulatedOracle {
    pub fn new(dataset: &Dataset) -> Self {
        SimulatedOracle {
            truth: dataset.labels.clone(),
            pending: Vec::new(),
        }
    }
}

impl Oracle for SimulatedOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Simulated
    }

    fn ground_truth(&self) -> Option<&[usize]> {
        Some(&self.truth)
    }

    fn request(&mut self, _round: usize, items: &[QueryItem]) -> Result<()> {
        self.pending = items.iter().map(|i| i.id).collect();
        Ok(())
    }

    fn poll(&mut self) -> Result<Vec<(usize, usize)>> {
        Ok(self.pending.drain(..).map(|id| (id, self.truth[id])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlConfig {
    /// Maximum number of rounds.
    pub rounds: usize,
    pub query: QuerySpec,
    pub n_bins: usize,
    /// Stop querying once this many labels exist.
    pub label_cap: Option<usize>,
    /// Whether the initial labeled pool counts towards `label_cap`.
    pub cap_counts_seed: bool,
    /// Stop after the first round whose evaluation accuracy reaches this.
    pub stop_accuracy: Option<f64>,
    /// Evaluate the untrained model before round 1.
    pub eval_before_training: bool,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            rounds: 10,
            query: QuerySpec::default(),
            n_bins: DEFAULT_BINS,
            label_cap: None,
            cap_counts_seed: true,
            stop_accuracy: None,
            eval_before_training: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Labeled samples the model was trained on this round.
    pub labeled_train: usize,
    /// Pool sizes after the oracle update.
    pub labeled: usize,
    pub unlabeled: usize,
    pub queried: Vec<QueryItem>,
    pub report: CalibrationReport,
    pub metrics: RoundMetrics,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Exhausted,
    Stopped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config: serde_json::Value,
    pub initial: Option<CalibrationReport>,
    pub rounds: Vec<RoundRecord>,
    pub status: RunStatus,
}

impl RunLog {
    /// The log with wall-clock fields zeroed; everything else is a pure
    /// function of seeds and configuration.
    pub fn deterministic(&self) -> RunLog {
        let mut log = self.clone();
        for r in &mut log.rounds {
            r.wall_ms = 0;
        }
        log
    }

    pub fn rounds_csv(&self) -> String {
        let mut out = String::from(
            "round,labeled_train,labeled,unlabeled,queried,accuracy,ece,ce,energy_gap,grad_norm,energy_pos,energy_neg,wall_ms\n",
        );
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.labeled_train,
                r.labeled,
                r.unlabeled,
                r.queried.len(),
                r.report.accuracy,
                r.report.ece,
                r.metrics.ce,
                r.metrics.energy_gap,
                r.metrics.grad_norm,
                r.metrics.energy_pos,
                r.metrics.energy_neg,
                r.wall_ms
            );
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("round,epoch,ce,energy_gap,grad_norm\n");
        for r in &self.rounds {
            for e in &r.metrics.epochs {
                let _ = writeln!(out, "{},{},{},{},{}", r.round, e.epoch, e.ce, e.energy_gap, e.grad_norm);
            }
        }
        out
    }
}

/// Moves the answered ids from the unlabeled to the labeled pool.
///
/// Every answered id must belong to `query` and still be unlabeled; an id
/// may be answered once.
pub fn apply_oracle_update(
    pools: &PoolPartition,
    query: &[usize],
    labels: &[(usize, usize)],
) -> Result<PoolPartition> {
    let query: BTreeSet<usize> = query.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut next = pools.clone();
    for &(id, label) in labels {
        if !query.contains(&id) {
            return Err(Error::validation(format!("label for sample {id}, which was not queried")));
        }
        if !seen.insert(id) {
            return Err(Error::validation(format!("duplicate label for sample {id}")));
        }
        if !next.unlabeled.remove(&id) {
            return Err(Error::validation(format!("sample {id} is not in the unlabeled pool")));
        }
        next.labeled.insert(id, label);
    }
    Ok(next)
}

/// Persistent run directory:
///
/// ```text
/// config.json                 configuration snapshot
/// rounds.jsonl                one RoundRecord per line
/// rounds.csv, epochs.csv      flat views of the records
/// checkpoints/round-NNN/      model.json, params.bin, pools.json
/// final/                      last model
/// summary.json                the complete RunLog
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config: &serde_json::Value) -> Result<Self> {
        fs::create_dir_all(path)?;
        let dir = RunDir { path: path.to_path_buf() };
        let cfg = path.join("config.json");
        if !cfg.exists() {
            fs::write(cfg, serde_json::to_vec_pretty(config)?)?;
        }
        Ok(dir)
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join("config.json").exists() {
            return Err(Error::validation(format!("{} is not a run directory", path.display())));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    fn checkpoint_dir(&self, round: usize) -> PathBuf {
        self.path.join("checkpoints").join(format!("round-{round:03}"))
    }

    pub fn config(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_slice(&fs::read(self.path.join("config.json"))?)?)
    }

    pub fn rounds(&self) -> Result<Vec<RoundRecord>> {
        let path = self.path.join("rounds.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    /// Checkpoints the model and pools and appends the record.
    pub fn save_round(&self, record: &RoundRecord, model: &ModelState, pools: &PoolPartition) -> Result<()> {
        let ckpt = self.checkpoint_dir(record.round);
        model.save(&ckpt)?;
        fs::write(ckpt.join("pools.json"), serde_json::to_vec(pools)?)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path.join("rounds.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn save_initial(&self, report: &CalibrationReport) -> Result<()> {
        fs::write(self.path.join("initial.json"), serde_json::to_vec_pretty(report)?)?;
        Ok(())
    }

    fn initial(&self) -> Result<Option<CalibrationReport>> {
        let path = self.path.join("initial.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn write_log(&self, log: &RunLog) -> Result<()> {
        fs::write(self.path.join("summary.json"), serde_json::to_vec_pretty(log)?)?;
        fs::write(self.path.join("rounds.csv"), log.rounds_csv())?;
        fs::write(self.path.join("epochs.csv"), log.epochs_csv())?;
        Ok(())
    }

    pub fn save_final(&self, model: &ModelState) -> Result<()> {
        model.save(&self.path.join("final"))
    }

    /// The last completed round's model and pools, if any.
    pub fn resume_point(&self) -> Result<Option<(Vec<RoundRecord>, ModelState, PoolPartition)>> {
        let rounds = self.rounds()?;
        let Some(last) = rounds.last() else {
            return Ok(None);
        };
        let ckpt = self.checkpoint_dir(last.round);
        let model = ModelState::load(&ckpt)?;
        let pools = serde_json::from_slice(&fs::read(ckpt.join("pools.json"))?)?;
        Ok(Some((rounds, model, pools)))
    }

    pub fn load_log(&self) -> Result<RunLog> {
        let summary = self.path.join("summary.json");
        if summary.exists() {
            return Ok(serde_json::from_slice(&fs::read(summary)?)?);
        }
        let config = self.config()?;
        let seed = config.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
        Ok(RunLog {
            seed,
            config,
            initial: self.initial()?,
            rounds: self.rounds()?,
            status: RunStatus::Running,
        })
    }
}

/// Everything one active-learning run needs besides the oracle.
#[derive(Debug, Clone)]
pub struct AlSetup<'a> {
    pub dataset: &'a Dataset,
    pub pools: PoolPartition,
    pub model: ModelState,
    pub train: TrainConfig,
    pub sgld: SgldConfig,
    pub al: AlConfig,
    pub seed: u64,
    pub snapshot: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct AlOutcome {
    pub log: RunLog,
    pub model: ModelState,
    pub pools: PoolPartition,
}

pub fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn remaining_budget(al: &AlConfig, pools: &PoolPartition, seed_size: usize) -> usize {
    match al.label_cap {
        None => usize::MAX,
        Some(cap) => {
            let used = if al.cap_counts_seed {
                pools.labeled.len()
            } else {
                pools.labeled.len().saturating_sub(seed_size)
            };
            cap.saturating_sub(used)
        }
    }
}

fn select_query(
    setup: &AlSetup<'_>,
    model: &ModelState,
    pools: &PoolPartition,
    oracle: &dyn Oracle,
    budget: usize,
    round: usize,
) -> Result<Vec<QueryItem>> {
    let unlabeled = pools.unlabeled_ids();
    let spec = &setup.al.query;
    let truth = oracle.ground_truth();
    let mut items = match spec.strategy {
        Strategy::LeastConfidence => {
            least_confidence_query(model, &unlabeled, setup.dataset, spec.size.min(budget))?
        }
        Strategy::EqualClass => {
            if oracle.kind() != OracleKind::Simulated {
                return Err(Error::validation(
                    "equal_class consults ground truth and is refused for a live oracle",
                ));
            }
            let truth = truth.ok_or_else(|| Error::validation("equal_class needs ground-truth labels"))?;
            let per_class = spec.labels_per_class.min(budget / setup.dataset.num_classes);
            equal_class_query(model, &unlabeled, setup.dataset, per_class, truth)?
        }
        Strategy::Random => {
            let seed = spec.seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let ids = random_query(&unlabeled, spec.size.min(budget), seed)?;
            let mut scored = crate::query::score_pool(model, setup.dataset, &ids)?;
            scored.iter_mut().zip(&ids).for_each(|(s, &id)| s.id = id);
            scored
        }
    };
    if let Some(truth) = truth {
        for item in &mut items {
            item.truth = Some(truth[item.id]);
        }
    }
    Ok(items)
}

/// Runs the active-learning loop, resuming from `store` when it already
/// holds completed rounds.
pub fn run_al(setup: AlSetup<'_>, oracle: &mut dyn Oracle, store: Option<&RunDir>) -> Result<AlOutcome> {
    setup.train.validate()?;
    setup.al.query.validate()?;
    if setup.train.gen_weight > 0.0 {
        setup.sgld.validate()?;
    }
    if setup.al.rounds < 1 {
        return Err(Error::validation("need at least one round"));
    }
    setup.pools.check_invariants()?;

    let seed_size = setup.pools.labeled.len();
    let mut model = setup.model.clone();
    let mut pools = setup.pools.clone();
    let mut log = RunLog {
        seed: setup.seed,
        config: setup.snapshot.clone(),
        initial: None,
        rounds: Vec::new(),
        status: RunStatus::Running,
    };

    if let Some(store) = store {
        if let Some((rounds, m, p)) = store.resume_point()? {
            model = m;
            pools = p;
            log.rounds = rounds;
        }
        log.initial = store.initial()?;
    }

    if setup.al.eval_before_training && log.initial.is_none() {
        let report = evaluate_model(&model, setup.dataset, &pools.eval, setup.al.n_bins)?;
        if let Some(store) = store {
            store.save_initial(&report)?;
        }
        log.initial = Some(report);
    }

    let first_round = log.rounds.last().map_or(1, |r| r.round + 1);
    let already_stopped = log.rounds.last().is_some_and(|r| {
        setup.al.stop_accuracy.is_some_and(|t| r.report.accuracy >= t)
    });
    if already_stopped {
        log.status = RunStatus::Stopped;
    }

    for round in first_round..=setup.al.rounds {
        if already_stopped {
            break;
        }
        if pools.unlabeled.is_empty() {
            log.status = RunStatus::Exhausted;
            break;
        }
        let budget = remaining_budget(&setup.al, &pools, seed_size);
        if budget == 0 {
            log.status = RunStatus::Exhausted;
            break;
        }
        let started = Instant::now();
        let mut rng = round_rng(setup.seed, round);
        let labeled_train = pools.labeled.len();

        let (trained, metrics) = match train_round(&model, &pools, setup.dataset, &setup.train, &setup.sgld, &mut rng) {
            Ok(out) => out,
            Err(Error::Numeric(msg)) => {
                log.status = RunStatus::Failed(format!("round {round}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        model = trained;

        let items = select_query(&setup, &model, &pools, oracle, budget, round)?;
        let query_ids: Vec<usize> = items.iter().map(|i| i.id).collect();
        oracle.request(round, &items)?;
        let mut outstanding: BTreeSet<usize> = query_ids.iter().copied().collect();
        while !outstanding.is_empty() {
            let answers = oracle.poll()?;
            let fresh: Vec<(usize, usize)> = answers
                .into_iter()
                .filter(|(id, _)| outstanding.contains(id))
                .collect();
            if fresh.is_empty() {
                std::thread::sleep(oracle.poll_interval().max(Duration::from_millis(1)));
                continue;
            }
            pools = apply_oracle_update(&pools, &query_ids, &fresh)?;
            for (id, _) in &fresh {
                outstanding.remove(id);
            }
        }

        let report = evaluate_model(&model, setup.dataset, &pools.eval, setup.al.n_bins)?;
        let record = RoundRecord {
            round,
            labeled_train,
            labeled: pools.labeled.len(),
            unlabeled: pools.unlabeled.len(),
            queried: items,
            report,
            metrics,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(store) = store {
            store.save_round(&record, &model, &pools)?;
        }
        let stop = setup.al.stop_accuracy.is_some_and(|t| record.report.accuracy >= t);
        log.rounds.push(record);
        if stop {
            log.status = RunStatus::Stopped;
            break;
        }
    }
    if log.status == RunStatus::Running {
        log.status = RunStatus::Completed;
    }
    if let Some(store) = store {
        store.save_final(&model)?;
        store.write_log(&log)?;
    }
    Ok(AlOutcome { log, model, pools })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools() -> PoolPartition {
        PoolPartition {
            labeled: (0..50).map(|i| (i, i % 3)).collect(),
            unlabeled: (50..800).collect(),
            eval: (800..1000).collect(),
            seed: 0,
        }
    }

    #[test]
    fn update_moves_queried_ids() {
        let p = pools();
        let query: Vec<usize> = (100..110).collect();
        let labels: Vec<(usize, usize)> = query.iter().map(|&i| (i, 1)).collect();
        let next = apply_oracle_update(&p, &query, &labels).unwrap();
        assert_eq!((next.labeled.len(), next.unlabeled.len()), (60, 740));
        let before: BTreeSet<usize> = p.training_ids().into_iter().collect();
        let after: BTreeSet<usize> = next.training_ids().into_iter().collect();
        assert_eq!(before, after);
        assert_eq!(next.eval, p.eval);
    }

    #[test]
    fn empty_answer_batch_is_a_no_op() {
        let p = pools();
        assert_eq!(apply_oracle_update(&p, &[100], &[]).unwrap(), p);
    }

    #[test]
    fn update_rejects_bad_answers() {
        let p = pools();
        assert!(apply_oracle_update(&p, &[100], &[(101, 0)]).is_err());
        assert!(apply_oracle_update(&p, &[100], &[(100, 0), (100, 0)]).is_err());
        assert!(apply_oracle_update(&p, &[3], &[(3, 0)]).is_err());
    }

    #[test]
    fn round_streams_differ() {
        use rand::RngCore;
        assert_ne!(round_rng(1, 1).next_u64(), round_rng(1, 2).next_u64());
        assert_eq!(round_rng(1, 1).next_u64(), round_rng(1, 1).next_u64());
    }
}
