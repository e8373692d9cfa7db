use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zo")).args(args).current_dir(cwd).env_remove("ZO_RESULTS_DIR").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
version = 1
name = "cli"
seeds = [0]
batch_size = 16

[model]
kind = "mlp"
hidden = [6]

[data]
task = "mlp-classify"
dim = 4
classes = 3
n_train = 120
n_test = 60

[optimizer]
method = "zo"
epsilon = 1e-3
lr = 0.01
q = 2
steps = 40
"#;

#[test]
fn train_then_replay_revert_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cli.toml"), CONFIG).unwrap();
    ok(&zo(&["train", "cli.toml"], d));
    let run = d.join("results/cli/runs/seed0");
    for f in ["init.zops", "final.zops", "seed.zolog", "summary.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let r = |p: &str| run.join(p).to_str().unwrap().to_string();
    ok(&zo(&["replay", "--log", &r("seed.zolog"), "--init", &r("init.zops"), "--out", &r("replayed.zops")], d));
    ok(&zo(&["revert", "--log", &r("seed.zolog"), "--params", &r("final.zops"), "--out", &r("reverted.zops")], d));
    let load = |p: &str| zo_harness::run::load_params(&run.join(p)).unwrap();
    assert!(load("replayed.zops").max_abs_diff(&load("final.zops")) < 1e-6);
    assert!(load("reverted.zops").max_abs_diff(&load("init.zops")) < 1e-6);

    let text = ok(&zo(&["inspect", &r("seed.zolog")], d));
    assert!(text.contains("80"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&ok(&zo(&["inspect", "--json", &r("seed.zolog")], d))).unwrap();
    assert_eq!(json["records"], 80);
    assert_eq!(json["steps"], 40);
    assert_eq!(json["bytes"], 60 + 12 * 80);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cli.toml"), CONFIG).unwrap();
    ok(&zo(&["sweep", "cli.toml", "--out", "swept", "--seeds", "4,5", "--q", "1,4", "--forward-budget", "16"], d));
    let mut runs: Vec<String> = fs::read_dir(d.join("swept/runs")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    runs.sort();
    assert_eq!(runs, ["q1_seed4", "q1_seed5", "q4_seed4", "q4_seed5"]);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("swept/runs/q4_seed5/summary.json")).unwrap()).unwrap();
    assert_eq!(s["forwards"], 16);
    assert_eq!(s["steps"], 2);

    let out = Command::new(env!("CARGO_BIN_EXE_zo")).args(["train", "cli.toml", "--name", "renamed"]).current_dir(d).env("ZO_RESULTS_DIR", "elsewhere").output().unwrap();
    ok(&out);
    assert!(d.join("elsewhere/renamed/metrics.csv").is_file());

    let csv = d.join("table.csv");
    let table = ok(&zo(&["compare", "swept", "--metric", "final_train_loss", "--baseline", "cli/q1", "--csv", csv.to_str().unwrap()], d));
    assert!(table.contains("cli/q4"), "{table}");
    assert!(fs::read_to_string(csv).unwrap().starts_with("label,n,mean,sd,relative_pct"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cli.toml"), CONFIG).unwrap();
    let out = zo(&["tta", "cli.toml"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    ok(&zo(&["train", "cli.toml", "-o", "r"], d));
    let out = zo(&["compare", "r", "--metric", "final_train_loss", "--baseline", "missing"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = zo(&["train", "no-such-file.toml"], d);
    assert!(!out.status.success());
}
