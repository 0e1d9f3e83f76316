//! HTTP oracle: exposes each round's query to a human annotator and feeds
//! the answers back into the active-learning loop.
//!
//! Classes are 1-based on the wire. Every accepted label is appended to
//! `labels.jsonl` in the run directory and synced before the reply, and the
//! log is replayed when the same round's query is posted again after a
//! restart.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use calico_core::data::{denormalize_pixel, Dataset};
use calico_core::orchestrator::{Oracle, OracleKind, RunDir, RunLog, RunStatus};
use calico_core::query::QueryItem;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{prepare, run_prepared, seed_dir, write_experiment_header};
use crate::report;

pub const LABEL_LOG: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Awaiting,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Payload {
    /// Base64 of the row-major 8-bit pixels, height x width x channels.
    Image { height: usize, width: usize, channels: usize, data: String },
    Point { x: f64, y: f64 },
    Vector { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: usize,
    pub confidence: f64,
    /// 1-based.
    pub predicted: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub round: usize,
    pub phase: Phase,
    pub labeled: usize,
    pub unlabeled: usize,
    pub outstanding: usize,
    pub queued: usize,
    pub rounds_completed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassesView {
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    /// 1-based.
    pub class: usize,
    pub name: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelRequest {
    pub id: usize,
    pub class: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReply {
    pub id: usize,
    pub class: usize,
    /// `accepted` for a new label, `duplicate` for an identical resubmission.
    pub status: String,
    pub outstanding: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    round: usize,
    id: usize,
    class: usize,
}

struct ServiceState {
    round: usize,
    phase: Phase,
    queue: Vec<QueryItem>,
    /// Answers of the current round, 0-based.
    answered: BTreeMap<usize, usize>,
    /// Answers already handed to the loop.
    delivered: BTreeSet<usize>,
    labeled: usize,
    unlabeled: usize,
    rounds_completed: usize,
    error: Option<String>,
    stopping: bool,
    log: File,
}

impl ServiceState {
    fn outstanding(&self) -> usize {
        self.queue.len() - self.answered.len()
    }
}

/// State shared by the HTTP handlers and the loop's oracle.
pub struct Shared {
    dataset: Arc<Dataset>,
    classes: Vec<String>,
    log_path: PathBuf,
    state: Mutex<ServiceState>,
}

impl Shared {
    pub fn new(dataset: Arc<Dataset>, class_names: &[String], run_dir: &Path, labeled: usize, unlabeled: usize) -> Result<Arc<Self>> {
        let k = dataset.num_classes;
        let classes = if class_names.is_empty() {
            (1..=k).map(|c| format!("class {c}")).collect()
        } else if class_names.len() == k {
            class_names.to_vec()
        } else {
            return Err(HarnessError::config(format!("{} class names for {k} classes", class_names.len())));
        };
        fs::create_dir_all(run_dir)?;
        let log_path = run_dir.join(LABEL_LOG);
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Arc::new(Shared {
            dataset,
            classes,
            log_path,
            state: Mutex::new(ServiceState {
                round: 0,
                phase: Phase::Training,
                queue: Vec::new(),
                answered: BTreeMap::new(),
                delivered: BTreeSet::new(),
                labeled,
                unlabeled,
                rounds_completed: 0,
                error: None,
                stopping: false,
                log,
            }),
        }))
    }

    fn lock(&self) -> MutexGuard<'_, ServiceState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> StatusView {
        let s = self.lock();
        StatusView {
            round: s.round,
            phase: s.phase,
            labeled: s.labeled,
            unlabeled: s.unlabeled,
            outstanding: s.outstanding(),
            queued: s.queue.len(),
            rounds_completed: s.rounds_completed,
            error: s.error.clone(),
        }
    }

    pub fn classes(&self) -> ClassesView {
        ClassesView {
            classes: self
                .classes
                .iter()
                .enumerate()
                .map(|(i, name)| ClassEntry { class: i + 1, name: name.clone() })
                .collect(),
        }
    }

    fn payload(&self, id: usize) -> Payload {
        let x = self.dataset.sample(id);
        match self.dataset.image {
            Some(shape) => {
                let bytes: Vec<u8> = x.iter().map(|&v| denormalize_pixel(v)).collect();
                Payload::Image {
                    height: shape.height,
                    width: shape.width,
                    channels: shape.channels,
                    data: base64::engine::general_purpose::STANDARD.encode(bytes),
                }
            }
            None if x.len() == 2 => Payload::Point { x: x[0], y: x[1] },
            None => Payload::Vector { values: x.to_vec() },
        }
    }

    pub fn queue(&self) -> Vec<QueueEntry> {
        let s = self.lock();
        s.queue
            .iter()
            .filter(|item| !s.answered.contains_key(&item.id))
            .map(|item| QueueEntry {
                id: item.id,
                confidence: item.confidence,
                predicted: item.predicted + 1,
                payload: self.payload(item.id),
            })
            .collect()
    }

    /// Validates and records one label; the error carries the HTTP status.
    pub fn submit(&self, req: &LabelRequest) -> std::result::Result<LabelReply, (StatusCode, String)> {
        let k = self.classes.len() as i64;
        if req.class < 1 || req.class > k {
            return Err((StatusCode::BAD_REQUEST, format!("class {} outside 1..={k}", req.class)));
        }
        let class = (req.class - 1) as usize;
        let mut s = self.lock();
        if !s.queue.iter().any(|item| item.id == req.id) {
            return Err((StatusCode::CONFLICT, format!("sample {} is not in the current queue", req.id)));
        }
        match s.answered.get(&req.id) {
            Some(&prev) if prev == class => {
                return Ok(LabelReply {
                    id: req.id,
                    class: class + 1,
                    status: "duplicate".into(),
                    outstanding: s.outstanding(),
                })
            }
            Some(&prev) => {
                return Err((
                    StatusCode::CONFLICT,
                    format!("sample {} is already labeled as class {}", req.id, prev + 1),
                ))
            }
            None => {}
        }
        let line = LogLine { round: s.round, id: req.id, class: class + 1 };
        let mut text = serde_json::to_string(&line).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        text.push('\n');
        s.log
            .write_all(text.as_bytes())
            .and_then(|_| s.log.sync_data())
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, format!("cannot persist label: {e}")))?;
        s.answered.insert(req.id, class);
        Ok(LabelReply {
            id: req.id,
            class: class + 1,
            status: "accepted".into(),
            outstanding: s.outstanding(),
        })
    }

    fn replay(&self, round: usize, queue: &[QueryItem]) -> Result<BTreeMap<usize, usize>> {
        let ids: BTreeSet<usize> = queue.iter().map(|i| i.id).collect();
        let mut answered = BTreeMap::new();
        let text = fs::read_to_string(&self.log_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(entry) = serde_json::from_str::<LogLine>(line) else {
                // A torn final line from a crash mid-write was never acknowledged.
                continue;
            };
            if entry.round == round && ids.contains(&entry.id) && (1..=self.classes.len()).contains(&entry.class) {
                answered.entry(entry.id).or_insert(entry.class - 1);
            }
        }
        Ok(answered)
    }

    fn finish(&self, log: &Result<RunLog>) {
        let mut s = self.lock();
        s.queue.clear();
        s.answered.clear();
        match log {
            Ok(log) => {
                s.rounds_completed = log.rounds.len();
                if let Some(last) = log.rounds.last() {
                    s.labeled = last.labeled;
                    s.unlabeled = last.unlabeled;
                }
                if let RunStatus::Failed(reason) = &log.status {
                    s.phase = Phase::Failed;
                    s.error = Some(reason.clone());
                } else {
                    s.phase = Phase::Finished;
                }
            }
            Err(e) => {
                s.phase = Phase::Failed;
                s.error = Some(e.to_string());
            }
        }
    }

    fn stop(&self) {
        self.lock().stopping = true;
    }
}

/// Oracle backed by the HTTP service.
pub struct RemoteOracle {
    shared: Arc<Shared>,
    interval: Duration,
}

impl RemoteOracle {
    pub fn new(shared: Arc<Shared>, interval: Duration) -> Self {
        RemoteOracle { shared, interval }
    }
}

impl Oracle for RemoteOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Remote
    }

    fn request(&mut self, round: usize, items: &[QueryItem]) -> calico_core::Result<()> {
        let replayed = self.shared.replay(round, items).map_err(|e| calico_core::Error::Validation(e.to_string()))?;
        let mut s = self.shared.lock();
        s.round = round;
        s.rounds_completed = round - 1;
        s.queue = items.to_vec();
        s.answered = replayed;
        s.delivered.clear();
        s.phase = Phase::Awaiting;
        Ok(())
    }

    fn poll(&mut self) -> calico_core::Result<Vec<(usize, usize)>> {
        let mut s = self.shared.lock();
        if s.stopping {
            return Err(calico_core::Error::Validation("the annotation service was stopped".into()));
        }
        let fresh: Vec<(usize, usize)> = s
            .answered
            .iter()
            .filter(|(id, _)| !s.delivered.contains(id))
            .map(|(&id, &c)| (id, c))
            .collect();
        for (id, _) in &fresh {
            s.delivered.insert(*id);
        }
        s.labeled += fresh.len();
        s.unlabeled -= fresh.len();
        if s.delivered.len() == s.queue.len() {
            s.phase = Phase::Training;
        }
        Ok(fresh)
    }

    fn poll_interval(&self) -> Duration {
        self.interval
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

async fn get_queue(State(shared): State<Arc<Shared>>) -> Json<Vec<QueueEntry>> {
    Json(shared.queue())
}

async fn get_status(State(shared): State<Arc<Shared>>) -> Json<StatusView> {
    Json(shared.status())
}

async fn get_classes(State(shared): State<Arc<Shared>>) -> Json<ClassesView> {
    Json(shared.classes())
}

async fn post_label(
    State(shared): State<Arc<Shared>>,
    Json(req): Json<LabelRequest>,
) -> std::result::Result<Json<LabelReply>, ApiError> {
    shared.submit(&req).map(Json).map_err(|(code, msg)| ApiError(code, msg))
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/queue", get(get_queue))
        .route("/label", post(post_label))
        .route("/status", get(get_status))
        .route("/classes", get(get_classes))
        .with_state(shared)
}

/// The HTTP server running on its own thread.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn start(shared: Arc<Shared>, bind: &str) -> Result<ServiceHandle> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(shared);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(ServiceHandle { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_thread()
    }

    fn stop_thread(&mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            thread
                .join()
                .map_err(|_| HarnessError::Service("server thread panicked".into()))??;
        }
        Ok(())
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.stop_thread();
    }
}

/// A remote-oracle run: the loop on one thread, the service on another.
pub struct ServedRun {
    pub dir: PathBuf,
    pub seed: u64,
    pub shared: Arc<Shared>,
    service: ServiceHandle,
    worker: Option<JoinHandle<Result<RunLog>>>,
}

impl ServedRun {
    /// Starts (or resumes) the first seed of `cfg` in `dir` behind a service on `bind`.
    pub fn start(cfg: &ExperimentConfig, dir: &Path, bind: &str) -> Result<ServedRun> {
        if cfg.oracle.kind != OracleKind::Remote {
            return Err(HarnessError::config("serving needs oracle.kind = \"remote\""));
        }
        if !cfg.variant.uses_loop() {
            return Err(HarnessError::config("the baseline asks no queries"));
        }
        let seed = cfg.seeds[0];
        write_experiment_header(cfg, dir)?;
        let run_dir = seed_dir(dir, seed);
        let prep = prepare(cfg, seed)?;
        let resumed = if run_dir.join("config.json").exists() {
            RunDir::open(&run_dir)?.resume_point()?
        } else {
            None
        };
        let (labeled, unlabeled, done) = match &resumed {
            Some((rounds, _, pools)) => (pools.labeled.len(), pools.unlabeled.len(), rounds.len()),
            None => (prep.pools.labeled.len(), prep.pools.unlabeled.len(), 0),
        };
        let dataset = Arc::new(prep.dataset.clone());
        let shared = Shared::new(dataset, &cfg.dataset.class_names, &run_dir, labeled, unlabeled)?;
        shared.lock().rounds_completed = done;
        let service = ServiceHandle::start(shared.clone(), bind)?;

        let worker_cfg = cfg.clone();
        let worker_shared = shared.clone();
        let worker_dir = dir.to_path_buf();
        let interval = Duration::from_millis(cfg.oracle.poll_interval_ms);
        let worker = std::thread::spawn(move || {
            let mut oracle = RemoteOracle::new(worker_shared.clone(), interval);
            let log = run_prepared(&worker_cfg, seed, &seed_dir(&worker_dir, seed), &prep, &mut oracle);
            worker_shared.finish(&log);
            if log.is_ok() {
                report::emit(&worker_dir)?;
            }
            log
        });
        Ok(ServedRun {
            dir: dir.to_path_buf(),
            seed,
            shared,
            service,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.service.addr
    }

    pub fn is_finished(&self) -> bool {
        self.worker.as_ref().is_none_or(|w| w.is_finished())
    }

    /// Waits for the loop to end; the service keeps answering meanwhile.
    pub fn wait(&mut self) -> Result<RunLog> {
        let worker = self
            .worker
            .take()
            .ok_or_else(|| HarnessError::Service("run already collected".into()))?;
        worker
            .join()
            .map_err(|_| HarnessError::Service("orchestrator thread panicked".into()))?
    }

    /// Interrupts a loop that is waiting for labels and stops the service.
    /// Accepted labels stay in the log and are replayed on the next start.
    pub fn stop(mut self) -> Result<Option<RunLog>> {
        self.shared.stop();
        let log = match self.worker.take() {
            Some(w) => w.join().map_err(|_| HarnessError::Service("orchestrator thread panicked".into()))?.ok(),
            None => None,
        };
        self.service.shutdown()?;
        Ok(log)
    }

    pub fn shutdown(self) -> Result<()> {
        self.service.shutdown()
    }
}
