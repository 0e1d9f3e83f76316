use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use calico::config::{ExperimentConfig, Overrides};
use calico::experiment::{run_experiment_in, seed_dir};
use calico::report::{self, Experiment};
use calico_core::orchestrator::{RunDir, RunStatus};

fn config(variant: &str, seeds: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "small-{variant}"
variant = "{variant}"
seeds = {seeds}

[dataset]
synthetic = {{ classes = 3, per_class = 40, sigma = 0.45 }}
initial_labeled = 6
eval_fraction = 0.5

[train]
learning_rate = 0.1
epochs_per_round = 2
batch_labeled = 16
batch_all = 16
{extra}
"#
    );
    ExperimentConfig::from_toml(&text, &Overrides::default()).unwrap()
}

const CALICO: &str = "gen_weight = 1.0\n\n[sgld]\nstep_size = 0.01\nnoise_std = 0.1\nsteps = 5\n\n[al]\nrounds = 3\nquery = { size = 5 }\n";
const ACTIVE: &str = "\n[al]\nrounds = 3\nquery = { size = 5 }\n";

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for name in ["curves.csv", "summary.csv", "per_seed.csv"] {
        if let Ok(bytes) = fs::read(dir.join(name)) {
            out.insert(name.to_string(), bytes);
        }
    }
    for entry in fs::read_dir(dir.join("reliability")).unwrap() {
        let path = entry.unwrap().path();
        out.insert(
            format!("reliability/{}", path.file_name().unwrap().to_string_lossy()),
            fs::read(&path).unwrap(),
        );
    }
    out
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn baseline_gives_one_row_and_no_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("baseline", "[4]", "");
    let out = run_experiment_in(&cfg, tmp.path()).unwrap();
    assert!(out.failures.is_empty());
    let (_, log) = &out.runs[0];
    assert_eq!(log.rounds.len(), 1);
    assert_eq!(log.status, RunStatus::Completed);
    // Every training sample is labeled, none is queried.
    assert_eq!(log.rounds[0].unlabeled, 0);
    assert_eq!(log.rounds[0].labeled_train, 60);
    assert!(log.rounds[0].queried.is_empty());

    assert!(!tmp.path().join("curves.csv").exists());
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let rows = csv_rows(&summary);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..3], ["baseline", "Best", "1"]);
    assert_eq!(rows[0][3], format!("{:.2}", 100.0 * log.rounds[0].report.accuracy));
    assert!(tmp.path().join("reliability/seed-4.svg").exists());

    // A second invocation reuses the stored run.
    let again = run_experiment_in(&cfg, tmp.path()).unwrap();
    assert_eq!(again.runs[0].1, *log);
}

#[test]
fn three_seed_calico_aggregates_and_re_emits_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("calico", "[0, 1, 2]", CALICO);
    let out = run_experiment_in(&cfg, tmp.path()).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.runs.len(), 3);
    for (seed, log) in &out.runs {
        assert_eq!(log.rounds.len(), 3, "seed {seed}");
        let sizes: Vec<usize> = log.rounds.iter().map(|r| r.labeled_train).collect();
        assert_eq!(sizes, [6, 11, 16]);
    }

    // Curve rows against an independent aggregation of the stored logs.
    let curves = fs::read_to_string(tmp.path().join("curves.csv")).unwrap();
    let rows = csv_rows(&curves);
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        let acc: Vec<f64> = out.runs.iter().map(|(_, l)| l.rounds[i].report.accuracy).collect();
        let ece: Vec<f64> = out.runs.iter().map(|(_, l)| l.rounds[i].report.ece).collect();
        let (am, asd) = mean_sd(&acc);
        let (em, esd) = mean_sd(&ece);
        assert_eq!(row[0], out.runs[0].1.rounds[i].labeled_train.to_string());
        assert_eq!(row[1], "3");
        let expect = [am, asd, em, esd].map(|x| format!("{:.2}", 100.0 * x));
        assert_eq!(row[2..], expect);
    }

    // Best = earliest max-accuracy round with its ECE; Final = last round.
    let summary = csv_rows(&fs::read_to_string(tmp.path().join("summary.csv")).unwrap());
    assert_eq!(summary.len(), 2);
    let mut best = Vec::new();
    let mut last = Vec::new();
    for (_, log) in &out.runs {
        let mut b = &log.rounds[0];
        for r in &log.rounds {
            if r.report.accuracy > b.report.accuracy {
                b = r;
            }
        }
        best.push((b.report.accuracy, b.report.ece));
        let f = log.rounds.last().unwrap();
        last.push((f.report.accuracy, f.report.ece));
    }
    for (row, points) in summary.iter().zip([best, last]) {
        let acc: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ece: Vec<f64> = points.iter().map(|p| p.1).collect();
        assert_eq!(row[3], format!("{:.2}", 100.0 * mean_sd(&acc).0));
        assert_eq!(row[5], format!("{:.2}", 100.0 * mean_sd(&ece).0));
    }
    assert_eq!((summary[0][1].as_str(), summary[1][1].as_str()), ("Best", "Final"));

    // Emission is a pure function of the stored logs.
    let before = files(tmp.path());
    assert_eq!(before.len(), 3 + 6);
    fs::remove_file(tmp.path().join("curves.csv")).unwrap();
    fs::remove_dir_all(tmp.path().join("reliability")).unwrap();
    report::emit(tmp.path()).unwrap();
    assert_eq!(files(tmp.path()), before);

    let csv = fs::read_to_string(tmp.path().join("reliability/seed-1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15 + 1);
}

#[test]
fn fixed_seed_runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("calico", "[7]", CALICO);
    let x = run_experiment_in(&cfg, a.path()).unwrap();
    let y = run_experiment_in(&cfg, b.path()).unwrap();
    assert_eq!(x.runs[0].1.deterministic(), y.runs[0].1.deterministic());
    assert_eq!(
        fs::read(a.path().join("summary.csv")).unwrap(),
        fs::read(b.path().join("summary.csv")).unwrap()
    );
}

#[test]
fn diverging_seeds_are_recorded_and_do_not_stop_the_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = CALICO.replace("step_size = 0.01", "step_size = 1e6");
    let cfg = config("calico", "[0, 1]", &wild);
    let out = run_experiment_in(&cfg, tmp.path()).unwrap();
    assert_eq!(out.failures.len(), 2);
    assert!(out.failures.iter().all(|f| !f.reason.is_empty()));
    let recorded: Vec<calico::experiment::SeedFailure> =
        serde_json::from_slice(&fs::read(tmp.path().join("failures.json")).unwrap()).unwrap();
    assert_eq!(recorded, out.failures);
    // Failed runs are kept on disk but left out of the tables.
    assert!(RunDir::open(&seed_dir(tmp.path(), 1)).is_ok());
    assert_eq!(csv_rows(&fs::read_to_string(tmp.path().join("summary.csv")).unwrap())[0][2], "0");
}

#[test]
fn equal_variant_queries_the_same_count_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = CALICO.replace("query = { size = 5 }", "query = { labels_per_class = 2 }");
    let cfg = config("equal", "[3]", &extra);
    let out = run_experiment_in(&cfg, tmp.path()).unwrap();
    let (_, log) = &out.runs[0];
    for r in &log.rounds {
        let mut counts = [0usize; 3];
        for q in &r.queried {
            counts[q.truth.unwrap()] += 1;
        }
        assert_eq!(counts, [2, 2, 2], "round {}", r.round);
    }
}

#[test]
fn compare_prints_table_rows() {
    let base = tempfile::tempdir().unwrap();
    let active = tempfile::tempdir().unwrap();
    run_experiment_in(&config("baseline", "[0]", ""), base.path()).unwrap();
    run_experiment_in(&config("active", "[0]", ACTIVE), active.path()).unwrap();
    let cmp = report::compare(&[base.path().to_path_buf(), active.path().to_path_buf()]).unwrap();
    let lines: Vec<&str> = cmp.text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("baseline (small-baseline)") && lines[0].contains("active (small-active)"));
    assert!(lines[1].starts_with("Best ACC / ECE"));
    assert!(lines[2].starts_with("Final ACC / ECE"));
    let cells: Vec<&str> = lines[2].split("  ").map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(cells[1], "-");
    assert_eq!(cmp.csv.lines().count(), 1 + 1 + 2);

    let exp = Experiment::load(active.path()).unwrap();
    let last = exp.runs[0].rounds.last().unwrap();
    let expect = format!("{:.2} / {:.2}", 100.0 * last.report.accuracy, 100.0 * last.report.ece);
    assert_eq!(cells[2], expect);
}

#[test]
fn command_line_run_honours_output_root_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("exp.toml");
    fs::write(
        &cfg_path,
        format!(
            "name = \"cli\"\nvariant = \"active\"\nseeds = [0, 1, 2]\noutput = \"out\"\n\n[dataset]\nsynthetic = {{ classes = 3 }}\ninitial_labeled = 6\n\n[train]\nepochs_per_round = 1\n{ACTIVE}"
        ),
    )
    .unwrap();
    let root = tmp.path().join("root");
    let status = Command::new(env!("CARGO_BIN_EXE_calico"))
        .arg("run")
        .arg(&cfg_path)
        .args(["--seed", "5", "--dataset", "synthetic:classes=4,per_class=20,sigma=0.3"])
        .env("CALICO_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let dir = root.join("out");
    assert!(dir.join("seed-5/summary.json").exists());
    assert!(!dir.join("seed-0").exists());
    let exp = Experiment::load(&dir).unwrap();
    assert_eq!(exp.config.seeds, [5]);
    assert_eq!(exp.config.dataset.synthetic.as_ref().unwrap().classes, 4);

    let report = Command::new(env!("CARGO_BIN_EXE_calico")).arg("report").arg(&dir).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).starts_with("variant,row,"));

    let bad = Command::new(env!("CARGO_BIN_EXE_calico"))
        .arg("run")
        .arg(&cfg_path)
        .args(["--stop-when", "acc>=150"])
        .env("CALICO_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn invalid_configurations_fail_before_any_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = ExperimentConfig::from_toml(
        "variant = \"baseline\"\n[dataset]\nsynthetic = {}\n[al]\nrounds = 2\n",
        &Overrides::default(),
    );
    assert!(bad.is_err());
    let mut remote = config("active", "[0]", ACTIVE);
    remote.oracle.kind = calico_core::orchestrator::OracleKind::Remote;
    assert!(run_experiment_in(&remote, tmp.path()).is_err());
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn shipped_configurations_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::from_file(&path, &Overrides::default())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let paper = Overrides { protocol: calico::Protocol::Paper, ..Default::default() };
            ExperimentConfig::from_file(&path, &paper).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 6);
}
