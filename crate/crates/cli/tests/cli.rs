use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn causex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causex"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CAUSEX_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &[&str] = &[
    "--n",
    "4",
    "--c",
    "2",
    "--set",
    "explorer.horizon=200",
    "--set",
    "discovery.period=100",
    "--set",
    "discovery.kappa=60",
];

fn explore_small(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["explore"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out]);
    ok(&causex(&args, dir));
}

#[test]
fn identical_invocations_write_identical_traces() {
    let tmp = tempfile::tempdir().unwrap();
    explore_small(tmp.path(), "a", &["--seed", "11"]);
    explore_small(tmp.path(), "b", &["--seed", "11"]);
    for name in ["trace.csv", "trace.json", "config.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn snapshot_alone_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    explore_small(tmp.path(), "first", &["--seed", "4", "--set", "explorer.eta=0.2"]);
    ok(&causex(
        &["explore", "--config", "first/config.toml", "--out", "again"],
        tmp.path(),
    ));
    let a = std::fs::read(tmp.path().join("first/trace.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("again/trace.csv")).unwrap();
    assert_eq!(a, b);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("first/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 200);
    assert_eq!(summary["discoveries"].as_array().unwrap().len(), 2);
}

#[test]
fn theorem_ensemble_emits_one_report_per_instance() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&causex(&["verify-theorem", "--ensemble", "100", "--out", "th"], tmp.path()));
    let reports: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("th/reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 100);
    let csv = std::fs::read_to_string(tmp.path().join("th/steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 100 * (causex::theory::DEFAULT_STEPS + 1));
}

#[test]
fn single_theorem_instance_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&causex(
        &["verify-theorem", "--n", "3", "--c", "2", "--density", "0.4", "--steps", "20", "--mode", "projected", "--out", "one"],
        tmp.path(),
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("one/report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 21);
    assert_eq!(report["mode"], "projected");
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = causex(&["explore", "--set", "explorer.eta=-1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));
    std::fs::write(tmp.path().join("bad.toml"), "[env]\nwidth = 3\n").unwrap();
    let out = causex(&["gen-env", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
    let out = causex(&["explore", "--set", "noequals"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let out = causex(&["explore", "--config", "absent.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(4));
    let out = causex(&["metrics", "--input-dir", "absent"], tmp.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn flags_beat_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.toml"), "[env]\nn = 3\nc = 1\nseed = 5\n").unwrap();
    ok(&causex(&["gen-env", "--config", "cfg.toml", "--n", "6", "--out", "env.json"], tmp.path()));
    let spec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("env.json")).unwrap()).unwrap();
    assert_eq!(spec["n"], 6);
    assert_eq!(spec["c"], 1);
    assert_eq!(spec["seed"], 5);
}

#[test]
fn empty_config_file_means_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.toml"), "").unwrap();
    ok(&causex(&["gen-env", "--config", "empty.toml", "--out", "env.json"], tmp.path()));
    let text = std::fs::read_to_string(tmp.path().join("env.json")).unwrap();
    let spec = causex::env::EnvSpec::from_json(&text).unwrap();
    let default = causex::explorer::build_env(&causex::config::ExperimentConfig::default()).unwrap();
    assert_eq!(spec, default);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_causex"))
        .args(["gen-env", "--seed", "9"])
        .current_dir(tmp.path())
        .env("CAUSEX_OUTPUT_DIR", "elsewhere")
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("elsewhere/env-seed9.json").exists());
}

#[test]
fn discover_on_a_saved_buffer() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&causex(&["gen-env", "--n", "3", "--c", "1", "--seed", "2", "--out", "env.json"], tmp.path()));
    let spec = causex::env::EnvSpec::from_json(&std::fs::read_to_string(tmp.path().join("env.json")).unwrap()).unwrap();
    let buffer = causex::env::random_rollout(&spec, 300, 1).unwrap();
    std::fs::write(tmp.path().join("buffer.json"), serde_json::to_string(&buffer).unwrap()).unwrap();
    ok(&causex(
        &[
            "discover", "--n", "3", "--c", "1", "--env", "env.json", "--buffer", "buffer.json", "--train-steps", "50",
            "--set", "discovery.kappa=150", "--out", "d",
        ],
        tmp.path(),
    ));
    let d: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("d/discovery.json")).unwrap()).unwrap();
    assert_eq!(d["buffer_len"], 300);
    assert_eq!(d["selected"], 150);
    assert!(d["metrics"]["f1"].as_f64().is_some());
}

#[test]
fn metrics_pairs_labels_by_seed() {
    let tmp = tempfile::tempdir().unwrap();
    explore_small(tmp.path(), "runs/truth", &["--seed", "3", "--set", "discovery.graph=\"truth\""]);
    explore_small(tmp.path(), "runs/dense", &["--seed", "3", "--set", "discovery.graph=\"dense\""]);
    ok(&causex(
        &["metrics", "--input-dir", "runs", "--threshold", "10", "--out", "m.json"],
        tmp.path(),
    ));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["aggregates"].as_object().unwrap().len(), 2);
    let eff = m["efficiency"].as_array().unwrap();
    assert_eq!(eff.len(), 1);
    assert_eq!(eff[0]["label_a"], "dense");
    assert_eq!(eff[0]["label_b"], "truth");
}

#[test]
fn default_explore_smoke_run_is_quick() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&causex(&["explore", "--out", "smoke"], tmp.path()));
    assert!(start.elapsed().as_secs() < 60);
    let csv = std::fs::read_to_string(tmp.path().join("smoke/trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 1000);
}
