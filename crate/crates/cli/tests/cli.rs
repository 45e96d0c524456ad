use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgeforge::pipeline::RunReport;

fn edgeforge(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeforge"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("EDGEFORGE_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(workdir: &Path, args: &[&str]) {
    let out = edgeforge(workdir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_edgeforge")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn missing_input_reports_path_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = edgeforge(dir.path(), &["train", "--config", "nowhere.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["path"].as_str().unwrap().ends_with("nowhere.json"));
    assert!(err["message"].is_string());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"epoch": 3}"#).unwrap();
    let out = edgeforge(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    fs::write(
        w.join("spec.json"),
        r#"{"sbm": {"block_sizes": [100, 100], "block_means": [[3,0,0,0],[0,3,0,0]], "noise": 1.0,
            "feature_noise": null, "n_batches": 2, "batch_shift": 0.5, "label_rule": {"kind": "block"}, "seed": 3},
            "graph": {"pca_dim": 4, "k": 5, "mode": "bbknn"}}"#,
    )
    .unwrap();
    fs::write(
        w.join("run.json"),
        r#"{"backbone": "gat", "epochs": 15, "patience": 10, "seeds": [0, 1],
            "graph": {"pca_dim": 4, "k": 5}, "aux": {"epochs": 15, "patience": 10},
            "node2vec": {"walks_per_node": 2}}"#,
    )
    .unwrap();
    ok(w, &["synth", "--spec", "spec.json", "--out", "data"]);
    ok(w, &["assemble-edges", "--graph", "data", "--config", "run.json", "--out", "edges.tsv"]);
    ok(w, &["train", "--config", "run.json"]);
    ok(w, &["evaluate", "--config", "run.json"]);
    ok(w, &["interpret", "--checkpoint", "runs/model.efck", "--config", "run.json", "--out", "interp"]);

    let report = RunReport::from_json(&fs::read_to_string(w.join("runs/report.json")).unwrap()).unwrap();
    assert_eq!(report.to_json().unwrap(), fs::read_to_string(w.join("runs/report.json")).unwrap());
    for f in ["saliency.tsv", "importance.tsv", "attention_graph.tsv", "communities.tsv"] {
        assert!(w.join("interp").join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(w.join("edges.tsv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split('\t').count(), 20);
}
