//! The `cbo` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbo"))
        .args(args)
        .env_remove("CBO_SEED")
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"solver": {"T": 100}, "solver.K": 2}"#).unwrap();
    let out_dir = dir.path().join("run");
    let out = cbo(&[
        "run-quadratic",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--solver.T",
        "400",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let s = summary(&out_dir);
    assert_eq!(s["config"]["solver.T"], 400);
    assert_eq!(s["config"]["solver.K"], 2);
    let rows = fs::read_to_string(out_dir.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 401);
}

#[test]
fn eta_outside_the_unit_interval_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = cbo(&["run-quadratic", "--out", dir.path().to_str().unwrap(), "--eta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("(0, 1]"), "{}", stderr(&out));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn unknown_keys_and_missing_out_are_rejected() {
    let dir = TempDir::new().unwrap();
    let out = cbo(&["run-quadratic", "--out", dir.path().to_str().unwrap(), "--solver.nonsense", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cbo(&["run-quadratic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_config_applies_every_default() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("empty.json");
    fs::write(&cfg, "{}").unwrap();
    let out_dir = dir.path().join("run");
    let out = cbo(&["run-quadratic", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = summary(&out_dir)["config"].clone();
    let defaults = cbo_core::cli::config::defaults(cbo_core::cli::Command::RunQuadratic);
    assert_eq!(config.as_object().unwrap().len(), defaults.len());
    for (k, v) in &defaults {
        assert_eq!(&config[k], v, "{k}");
    }
}

#[test]
fn three_steps_give_three_rows_and_a_full_summary() {
    let dir = TempDir::new().unwrap();
    let out = cbo(&["run-quadratic", "--out", dir.path().to_str().unwrap(), "--T", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("step,"));
    let s = summary(dir.path());
    assert_eq!(s["command"], "run-quadratic");
    for k in cbo_core::cli::config::defaults(cbo_core::cli::Command::RunQuadratic).keys() {
        assert!(s["config"].get(k).is_some(), "{k}");
    }
    assert!(s["results"]["final_objective"].is_f64());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = cbo(&["run-quadratic", "--out", d.to_str().unwrap(), "--T", "20", "--solver.seed", "3"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn seed_environment_variable_wins() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cbo"))
        .args(["run-quadratic", "--out", dir.path().to_str().unwrap(), "--T", "2", "--solver.seed", "5"])
        .env("CBO_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(summary(dir.path())["seed"], 9);
}

#[test]
fn json_metrics_on_request() {
    let dir = TempDir::new().unwrap();
    let out = cbo(&["run-quadratic", "--out", dir.path().to_str().unwrap(), "--T", "4", "--output.format", "json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.as_array().unwrap().len(), 4);
}

#[test]
fn done_run_then_evaluate() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train");
    let out = cbo(&[
        "run-done",
        "--out",
        train.to_str().unwrap(),
        "--T",
        "30",
        "--n_train",
        "60",
        "--n_test_per_class",
        "10",
        "--pgd_steps",
        "5",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["metrics.csv", "model.json", "train.csv", "test.csv", "summary.json"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let trained = summary(&train);
    let ra = trained["results"]["robust_accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&ra));

    let eval = dir.path().join("eval");
    let out = cbo(&[
        "evaluate",
        "--out",
        eval.to_str().unwrap(),
        "--evaluate.model",
        train.join("model.json").to_str().unwrap(),
        "--evaluate.data",
        train.join("test.csv").to_str().unwrap(),
        "--pgd_steps",
        "5",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let evaluated = summary(&eval);
    assert_eq!(evaluated["results"]["examples"], 50);
    assert_eq!(evaluated["results"]["robust_accuracy"], trained["results"]["robust_accuracy"]);
    assert_eq!(evaluated["results"]["standard_accuracy"], trained["results"]["standard_accuracy"]);
}

#[test]
fn evaluate_without_a_model_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = cbo(&["evaluate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_and_scaling_write_their_tables() {
    let dir = TempDir::new().unwrap();
    let audit = dir.path().join("audit");
    let out = cbo(&["audit-gradients", "--out", audit.to_str().unwrap(), "--n_train", "20", "--points", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(summary(&audit)["results"]["passed"], true);
    assert!(fs::read_to_string(audit.join("audit.csv")).unwrap().lines().count() > 1);

    let scaling = dir.path().join("scaling");
    let out = cbo(&[
        "scaling-study",
        "--out",
        scaling.to_str().unwrap(),
        "--t_list",
        "[10, 40]",
        "--k_list",
        "[2, 4]",
        "--seeds",
        "[0, 1]",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = fs::read_to_string(scaling.join("scaling.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 2 * 2);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = cbo(&["run-quadratic", "--out", blocker.join("sub").to_str().unwrap(), "--T", "2"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}
