use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn muchgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muchgcn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMOKE: &str = r#"{
  "dataset": {"family": "synthetic", "generate": {"family": "cycles_vs_chords", "count": 20, "seed": 1}},
  "model": {"variant": "muchgcn_mh", "L": 2, "K": 2, "d": 8, "assign_ratio": 0.25, "channel_expansion": 2},
  "train": {"epochs": 50, "folds": 2, "batch_size": 5, "seed": 3}
}"#;

#[test]
fn missing_dataset_directory_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": {"path": "/definitely/not/here/PTC"}}"#);
    let out = muchgcn(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/definitely/not/here/PTC"), "{err}");
}

#[test]
fn train_with_override_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out_dir = dir.path().join("out");
    let out = muchgcn(&[
        "train",
        "--config",
        &cfg,
        "--override",
        "train.epochs=2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["train"]["epochs"], 2);
    assert_eq!(summary["fold_accuracies"].as_array().unwrap().len(), 2);
    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out = muchgcn(&["train", "--config", &cfg, "--override", "train.epochs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_subcommands_pass() {
    let out = muchgcn(&["verify", "gradcheck", "--seed", "7"]);
    assert!(out.status.success());
    let reports = stdout_json(&out);
    assert_eq!(reports.as_array().unwrap().len(), 5);

    let out = muchgcn(&["verify", "oracle", "--instances", "10"]);
    assert!(out.status.success());
    for r in stdout_json(&out).as_array().unwrap() {
        assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-10);
    }

    let out = muchgcn(&["verify", "prop1", "--trials", "200"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["passed"], true);
}

#[test]
fn bench_reports_the_full_grid() {
    let out = muchgcn(&[
        "bench", "--K", "1,2,4", "--C", "1,2,4", "--nodes", "12", "--hidden", "4", "--reps", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["cells"].as_array().unwrap().len(), 9);
    assert_eq!(report["k_ratios"].as_array().unwrap().len(), 6);
}

#[test]
fn bench_needs_three_repetitions() {
    let out = muchgcn(&["bench", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reps"));
}

#[test]
fn synth_is_reproducible_and_checks_its_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = muchgcn(&["synth", "--family", "k_communities", "--count", "24", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    let labels = |d: &Path| fs::read(d.join("k_communities_graph_labels.txt")).unwrap();
    let edges = |d: &Path| fs::read(d.join("k_communities_A.txt")).unwrap();
    assert_eq!(labels(&a), labels(&b));
    assert_eq!(edges(&a), edges(&b));
    assert_eq!(String::from_utf8(labels(&a)).unwrap().lines().count(), 24);

    let out = muchgcn(&["synth", "--family", "k_communities", "--count", "5", "--out", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
