use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use calico::config::{ExperimentConfig, Overrides};
use calico::experiment::seed_dir;
use calico::serve::{ClassesView, LabelReply, Payload, QueueEntry, ServedRun, StatusView, LABEL_LOG};
use calico_core::orchestrator::{RunDir, RunStatus};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::json;

fn config(rounds: usize) -> ExperimentConfig {
    let text = format!(
        r#"
name = "served"
variant = "calico"
seeds = [11]

[dataset]
synthetic = {{ classes = 3, per_class = 40, sigma = 0.45 }}
initial_labeled = 6
class_names = ["red", "green", "blue"]

[train]
epochs_per_round = 1
batch_labeled = 16
batch_all = 16

[sgld]
step_size = 0.01
noise_std = 0.1
steps = 5

[al]
rounds = {rounds}
query = {{ size = 10 }}

[oracle]
kind = "remote"
poll_interval_ms = 5
"#
    );
    ExperimentConfig::from_toml(&text, &Overrides::default()).unwrap()
}

struct Api {
    base: String,
    client: Client,
}

impl Api {
    fn new(run: &ServedRun) -> Api {
        Api {
            base: format!("http://{}", run.addr()),
            client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        }
    }

    fn status(&self) -> StatusView {
        self.client.get(format!("{}/status", self.base)).send().unwrap().json().unwrap()
    }

    fn queue(&self) -> Vec<QueueEntry> {
        self.client.get(format!("{}/queue", self.base)).send().unwrap().json().unwrap()
    }

    fn label(&self, id: usize, class: i64) -> (StatusCode, serde_json::Value) {
        let resp = self
            .client
            .post(format!("{}/label", self.base))
            .json(&json!({ "id": id, "class": class }))
            .send()
            .unwrap();
        (resp.status(), resp.json().unwrap())
    }

    fn wait_for_round(&self, round: usize) -> StatusView {
        let start = Instant::now();
        loop {
            let s = self.status();
            if s.round == round && s.phase == calico::serve::Phase::Awaiting {
                return s;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "round {round} never opened: {s:?}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

/// The labels the annotator gives in these tests, 1-based.
fn answer(id: usize) -> i64 {
    (id % 3) as i64 + 1
}

fn labeled_after(dir: &Path, round: usize) -> BTreeMap<usize, usize> {
    let run = RunDir::open(&seed_dir(dir, 11)).unwrap();
    let rounds = run.rounds().unwrap();
    assert!(rounds.len() >= round);
    let pools: calico_core::data::PoolPartition = serde_json::from_slice(
        &fs::read(seed_dir(dir, 11).join(format!("checkpoints/round-{round:03}/pools.json"))).unwrap(),
    )
    .unwrap();
    pools.labeled
}

#[test]
fn annotator_drives_two_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut run = ServedRun::start(&config(2), tmp.path(), "127.0.0.1:0").unwrap();
    let api = Api::new(&run);

    let classes: ClassesView = api.client.get(format!("{}/classes", api.base)).send().unwrap().json().unwrap();
    let names: Vec<(usize, &str)> = classes.classes.iter().map(|c| (c.class, c.name.as_str())).collect();
    assert_eq!(names, [(1, "red"), (2, "green"), (3, "blue")]);

    let status = api.wait_for_round(1);
    assert_eq!((status.outstanding, status.queued, status.rounds_completed), (10, 10, 0));
    assert_eq!((status.labeled, status.unlabeled), (6, 54));

    let queue = api.queue();
    assert_eq!(queue.len(), 10);
    for item in &queue {
        assert!(matches!(item.payload, Payload::Point { .. }));
        assert!((1..=3).contains(&item.predicted));
        assert!(item.confidence > 0.0 && item.confidence <= 1.0);
    }
    let confidences: Vec<f64> = queue.iter().map(|q| q.confidence).collect();
    assert!(confidences.windows(2).all(|w| w[0] <= w[1]));

    // Out-of-range class: rejected, queue untouched.
    let (code, _) = api.label(queue[0].id, 4);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = api.label(queue[0].id, 0);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(api.queue().len(), 10);

    // Ids outside the queue: an already labeled sample and a nonexistent one.
    let seeded = *seed_labeled_ids().first().unwrap();
    assert_eq!(api.label(seeded, 1).0, StatusCode::CONFLICT);
    assert_eq!(api.label(1_000_000, 1).0, StatusCode::CONFLICT);

    // First label, then an identical resubmission, then a conflicting one.
    let first = queue[0].id;
    let (code, body) = api.label(first, answer(first));
    assert_eq!(code, StatusCode::OK);
    let reply: LabelReply = serde_json::from_value(body).unwrap();
    assert_eq!((reply.status.as_str(), reply.outstanding), ("accepted", 9));
    let (code, body) = api.label(first, answer(first));
    assert_eq!(code, StatusCode::OK);
    let reply: LabelReply = serde_json::from_value(body).unwrap();
    assert_eq!((reply.status.as_str(), reply.outstanding), ("duplicate", 9));
    let other = answer(first) % 3 + 1;
    assert_eq!(api.label(first, other).0, StatusCode::CONFLICT);
    assert_eq!(api.queue().len(), 9);

    for item in &queue[1..] {
        assert_eq!(api.label(item.id, answer(item.id)).0, StatusCode::OK);
    }
    let round1: Vec<usize> = queue.iter().map(|q| q.id).collect();

    let status = api.wait_for_round(2);
    assert_eq!((status.labeled, status.unlabeled, status.rounds_completed), (16, 44, 1));
    let labeled = labeled_after(tmp.path(), 1);
    for id in &round1 {
        assert_eq!(labeled[id] as i64 + 1, answer(*id), "sample {id}");
    }
    assert_eq!(labeled.len(), 16);

    let queue2 = api.queue();
    assert_eq!(queue2.len(), 10);
    assert!(queue2.iter().all(|q| !round1.contains(&q.id)));
    // A round-1 id is no longer queued.
    assert_eq!(api.label(round1[0], answer(round1[0])).0, StatusCode::CONFLICT);
    for item in &queue2 {
        assert_eq!(api.label(item.id, answer(item.id)).0, StatusCode::OK);
    }

    let log = run.wait().unwrap();
    assert_eq!(log.status, RunStatus::Completed);
    assert_eq!(log.rounds.len(), 2);
    let status = api.status();
    assert_eq!(status.phase, calico::serve::Phase::Finished);
    assert_eq!((status.labeled, status.unlabeled, status.outstanding), (26, 34, 0));
    let labeled = labeled_after(tmp.path(), 2);
    for item in &queue2 {
        assert_eq!(labeled[&item.id] as i64 + 1, answer(item.id));
    }

    // Only accepted labels are logged; duplicates and rejections are not.
    let logged = fs::read_to_string(seed_dir(tmp.path(), 11).join(LABEL_LOG)).unwrap();
    assert_eq!(logged.lines().count(), 20);
    assert!(tmp.path().join("summary.csv").exists());
    run.shutdown().unwrap();
}

fn seed_labeled_ids() -> Vec<usize> {
    let prep = calico::experiment::prepare(&config(1), 11).unwrap();
    prep.pools.labeled.keys().copied().collect()
}

#[test]
fn concurrent_submissions_are_each_applied_once() {
    let tmp = tempfile::tempdir().unwrap();
    let mut run = ServedRun::start(&config(1), tmp.path(), "127.0.0.1:0").unwrap();
    let api = Api::new(&run);
    api.wait_for_round(1);
    let queue = api.queue();
    let base = api.base.clone();
    std::thread::scope(|s| {
        for worker in 0..4 {
            let queue = &queue;
            let base = base.clone();
            s.spawn(move || {
                let client = Client::new();
                // Every worker submits every label; three of the four copies are duplicates.
                for k in 0..queue.len() {
                    let item = &queue[(k + worker * 3) % queue.len()];
                    let resp = client
                        .post(format!("{base}/label"))
                        .json(&json!({ "id": item.id, "class": answer(item.id) }))
                        .send()
                        .unwrap();
                    assert_eq!(resp.status(), StatusCode::OK);
                }
            });
        }
    });
    let log = run.wait().unwrap();
    assert_eq!(log.rounds[0].labeled, 16);
    let logged = fs::read_to_string(seed_dir(tmp.path(), 11).join(LABEL_LOG)).unwrap();
    assert_eq!(logged.lines().count(), 10);
    run.shutdown().unwrap();
}

#[test]
fn accepted_labels_survive_a_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let run = ServedRun::start(&config(1), tmp.path(), "127.0.0.1:0").unwrap();
    let api = Api::new(&run);
    api.wait_for_round(1);
    let queue = api.queue();
    for item in &queue[..4] {
        assert_eq!(api.label(item.id, answer(item.id)).0, StatusCode::OK);
    }
    assert!(run.stop().unwrap().is_none());

    // The resumed run poses the same query and remembers the four answers.
    let mut run = ServedRun::start(&config(1), tmp.path(), "127.0.0.1:0").unwrap();
    let api = Api::new(&run);
    let status = api.wait_for_round(1);
    assert_eq!((status.queued, status.outstanding), (10, 6));
    let rest = api.queue();
    let ids: Vec<usize> = rest.iter().map(|q| q.id).collect();
    let expect: Vec<usize> = queue[4..].iter().map(|q| q.id).collect();
    assert_eq!(ids, expect);
    assert_eq!(api.label(queue[0].id, answer(queue[0].id)).1["status"], "duplicate");
    for item in &rest {
        assert_eq!(api.label(item.id, answer(item.id)).0, StatusCode::OK);
    }
    let log = run.wait().unwrap();
    assert_eq!(log.status, RunStatus::Completed);
    let labeled = labeled_after(tmp.path(), 1);
    for item in &queue {
        assert_eq!(labeled[&item.id] as i64 + 1, answer(item.id));
    }
    run.shutdown().unwrap();
}

#[test]
fn serving_requires_a_remote_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(1);
    cfg.oracle.kind = calico_core::orchestrator::OracleKind::Simulated;
    assert!(ServedRun::start(&cfg, tmp.path(), "127.0.0.1:0").is_err());
}
