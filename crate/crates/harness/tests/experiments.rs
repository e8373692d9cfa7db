use std::fs;
use std::path::Path;

use zo_harness::compare::{compare_summaries, relative_change_pct};
use zo_harness::run::{load_summaries, RunStatus, RunSummary};
use zo_harness::{compare, run_experiment, ExperimentConfig, UsageError};

const QUADRATIC: &str = r#"
version = 1
name = "bowl"
seeds = [0, 1]

[model]
kind = "quadratic"
dim = 6
condition = 4.0

[optimizer]
method = "zo"
epsilon = 1e-3
lr = 0.05
q = 2
steps = 30
"#;

const LOGISTIC: &str = r#"
version = 1
name = "lr-sweep"
replicates = 2
batch_size = 16
init = "zeros"

[model]
kind = "logistic"

[data]
task = "logistic"
dim = 5
classes = 2
n_train = 200
n_test = 100
seed = 100

[optimizer]
method = "zo"
epsilon = 1e-3
lr = 1.6
steps = 10

[sweep]
q = [1, 2, 4, 8, 16]
forward_budget = 160
"#;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for text in [QUADRATIC, LOGISTIC] {
        let c = cfg(text);
        run_experiment(&c, &dir.path().join("a")).unwrap();
        run_experiment(&c, &dir.path().join("b")).unwrap();
        for file in ["metrics.csv", "ablation.csv", "config.toml"] {
            let a = fs::read(dir.path().join("a").join(file)).unwrap();
            let b = fs::read(dir.path().join("b").join(file)).unwrap();
            assert_eq!(a, b, "{} differs for {}", file, c.name);
        }
        let a = fs::read(dir.path().join("a/runs").join(format!("{}seed1", if c.name == "bowl" { "" } else { "q4_" })).join("seed.zolog"));
        let b = fs::read(dir.path().join("b/runs").join(format!("{}seed1", if c.name == "bowl" { "" } else { "q4_" })).join("seed.zolog"));
        assert_eq!(a.unwrap(), b.unwrap());
        fs::remove_dir_all(dir.path().join("a")).unwrap();
        fs::remove_dir_all(dir.path().join("b")).unwrap();
    }
}

#[test]
fn q_sweep_writes_one_summary_per_run_and_an_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg(LOGISTIC), dir.path()).unwrap();
    assert_eq!(report.summaries.len(), 10);
    let summaries = load_summaries(dir.path()).unwrap();
    assert_eq!(summaries.len(), 10);
    for s in &summaries {
        let q = s.point.q.unwrap() as u64;
        assert_eq!(s.status, RunStatus::Ok);
        assert_eq!(s.forwards, 160);
        assert_eq!(s.expected_forwards, 160);
        assert_eq!(s.steps as u64, 160 / (2 * q));
        assert!(s.metrics["replay_max_abs_diff"] < 1e-10);
        assert!(dir.path().join("runs").join(&s.run_id).join("summary.json").is_file());
    }
    let mut labels: Vec<&str> = summaries.iter().map(|s| s.grid_label.as_str()).collect();
    labels.dedup();
    assert_eq!(labels, ["q1", "q2", "q4", "q8", "q16"]);

    let mut ablation = csv::Reader::from_path(dir.path().join("ablation.csv")).unwrap();
    let headers = ablation.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = ablation.records().map(Result::unwrap).collect();
    let loss_rows: Vec<_> = rows.iter().filter(|r| &r[col("metric")] == "final_train_loss").collect();
    assert_eq!(loss_rows.len(), 5);
    for r in loss_rows {
        assert_eq!(&r[col("n")], "2");
        assert_eq!(&r[col("forwards")], "160");
    }
}

#[test]
fn no_sweep_is_a_single_grid_point() {
    let c = cfg(QUADRATIC);
    assert_eq!(c.grid().len(), 1);
    assert!(c.grid()[0].label().is_empty());
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&ExperimentConfig { seeds: vec![3], ..c }, dir.path()).unwrap();
    assert_eq!(report.summaries.len(), 1);
    assert_eq!(report.summaries[0].run_id, "seed3");
}

#[test]
fn forwards_follow_the_budget_law() {
    let dir = tempfile::tempdir().unwrap();
    let zo = run_experiment(&cfg(QUADRATIC), &dir.path().join("zo")).unwrap();
    for s in &zo.summaries {
        assert_eq!(s.forwards, 2 * 2 * 30);
    }
    let fo_text = QUADRATIC.replace("method = \"zo\"\nepsilon = 1e-3\nlr = 0.05\nq = 2", "method = \"fo\"\nlr = 0.05\noptimizer = { kind = \"sgd\" }");
    let fo = run_experiment(&cfg(&fo_text), &dir.path().join("fo")).unwrap();
    for s in &fo.summaries {
        assert_eq!(s.method, "fo");
        assert_eq!(s.forwards, 30);
        assert_eq!(s.expected_forwards, 30);
    }
}

#[test]
fn failed_runs_keep_their_partial_results() {
    // At lr 1e300 the first update pushes f32 parameters past f32::MAX, and
    // the next loss evaluation is non-finite.
    let text = QUADRATIC.replace("seeds = [0, 1]", "seeds = [0, 1]\nwidth = \"f32\"");
    let c = ExperimentConfig { sweep: zo_harness::config::SweepAxes { lr: vec![0.05, 1e300], ..Default::default() }, ..cfg(&text) };
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(report.summaries.len(), 4);
    let failed: Vec<&RunSummary> = report.failures().collect();
    assert_eq!(failed.len(), 2, "{:?}", report.summaries.iter().map(|s| (&s.run_id, s.status)).collect::<Vec<_>>());
    for s in failed {
        assert!(s.grid_label == "lr1e300", "{}", s.grid_label);
        assert!(s.error.as_deref().unwrap().contains("non-finite"), "{:?}", s.error);
        let run = dir.path().join("runs").join(&s.run_id);
        let log = zo_core::seedlog::load(run.join("seed.zolog")).unwrap();
        assert_eq!(log.len(), 2, "one completed step of two queries");
        // The failing query stops at its first non-finite loss.
        assert_eq!(s.forwards, 2 * 2 + 1);
        let mut p = zo_harness::run::load_params(&run.join("init.zops")).unwrap();
        let sel = zo_core::Selection::all(&p);
        log.replay(&mut p, &sel).unwrap();
        let fin = zo_harness::run::load_params(&run.join("final.zops")).unwrap();
        assert!(!fin.is_finite() && !p.is_finite());
        let rows = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.lines().filter(|l| l.starts_with(&format!("{},", s.run_id))).count(), 1);
    }
    assert!(report.summaries.iter().filter(|s| s.status == RunStatus::Ok).all(|s| s.grid_label == "lr0.05"));
}

fn summary_with(experiment: &str, value: f64) -> RunSummary {
    serde_json::from_value(serde_json::json!({
        "summary_version": 1,
        "experiment": experiment,
        "kind": "tta",
        "index": 0,
        "run_id": "seed0",
        "grid_label": "",
        "point": {"q": null, "sigma": null, "sampler": null, "combine": null, "lr": null},
        "seed": 0,
        "method": "zo",
        "steps": 40,
        "forwards": 640,
        "expected_forwards": 640,
        "wall_clock_s": 1.0,
        "status": "ok",
        "error": null,
        "metrics": {"adapted_error": value},
        "artifacts": []
    }))
    .unwrap()
}

#[test]
fn comparison_reports_relative_change() {
    assert!((relative_change_pct(39.8, 53.2) + 25.1879).abs() < 1e-3);
    let p = Path::new("x");
    let rows = vec![(p, summary_with("zero-shot", 53.2)), (p, summary_with("zo", 39.8))];
    let t = compare_summaries(&rows, "adapted_error", "zero-shot").unwrap();
    assert_eq!(t.rows[0].relative_pct, 0.0);
    assert!((t.rows[1].relative_pct - -25.2).abs() < 0.05, "{}", t.rows[1].relative_pct);
    assert!(format!("{t}").contains("-25.2"));

    let err = compare_summaries(&rows, "adapted_error", "nope").unwrap_err();
    assert!(err.downcast_ref::<UsageError>().is_some());
    let err = compare_summaries(&rows, "no_such_metric", "zo").unwrap_err();
    assert!(err.to_string().contains("schema mismatch"));
    let mut old = summary_with("old", 1.0);
    old.summary_version = 0;
    assert!(compare_summaries(&[(p, old)], "adapted_error", "old").unwrap_err().to_string().contains("schema mismatch"));
}

#[test]
fn compare_reads_result_directories() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg(LOGISTIC), dir.path()).unwrap();
    let t = compare(&[dir.path().to_path_buf()], "final_train_loss", "lr-sweep/q1").unwrap();
    assert_eq!(t.rows.len(), 5);
    assert_eq!(t.rows[0].label, "lr-sweep/q1");
    assert_eq!(t.rows[0].relative_pct, 0.0);
    assert!(t.rows.iter().all(|r| r.n == 2));
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let bad = [
        LOGISTIC.replace("forward_budget = 160", "forward_budget = 100"),
        LOGISTIC.replace("q = [1, 2, 4, 8, 16]", "q = [0]"),
        QUADRATIC.replace("version = 1", "version = 2"),
        LOGISTIC.replace("task = \"logistic\"", "task = \"seq-classify\""),
    ];
    let dir = tempfile::tempdir().unwrap();
    for text in bad {
        let c = ExperimentConfig::from_toml(&text);
        if let Ok(c) = c {
            assert!(c.validate().is_err(), "{text}");
            assert!(run_experiment(&c, dir.path()).is_err());
        }
    }
    assert!(ExperimentConfig::from_toml(&QUADRATIC.replace("steps = 30", "steps = 30\nstepz = 1")).is_err());
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing should be written for invalid configs");
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let c = ExperimentConfig::load(&path).unwrap();
        c.validate().unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
