use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stacklab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stacklab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const EXPERIMENT: &str = r#"{
    "master_seed": 5,
    "cells": [{"task": "count3", "model": "lstm", "mode": "n"},
              {"task": "count3", "model": "lstm", "mode": "c"}],
    "train": {"max_epochs": 1, "restarts": 2, "model": {"name": "lstm", "hidden_size": 4}},
    "bins": [{"label": "short", "lo": 6, "hi": 15}, {"label": "long", "lo": 16, "hi": 30}],
    "data": {"train_range": [6, 12], "train_count": 20, "valid_count": 6},
    "eval_per_bin": 5,
    "stability": {"lengths": [6, 9, 12, 18, 24], "per_length": 4}
}"#;

#[test]
fn generate_writes_dataset_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = stacklab(
        &["generate", "--task", "marked_copy", "--min", "5", "--max", "9", "--count", "7", "--out", "d.txt"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("d.txt")).unwrap().lines().count(), 7);
    assert!(dir.path().join("d.txt.json").exists());
}

#[test]
fn invalid_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = stacklab(&["generate", "--task", "count7", "--out", "d.txt"], dir.path());
    assert_eq!(code(&o), 2);
    fs::write(dir.path().join("bad.json"), r#"{"cells": []}"#).unwrap();
    assert_eq!(code(&stacklab(&["run", "--config", "bad.json"], dir.path())), 2);
    assert_eq!(code(&stacklab(&["report", "--results", "missing.csv"], dir.path())), 2);
    assert_eq!(code(&stacklab(&["frobnicate"], dir.path())), 2);
}

#[test]
fn run_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.json"), EXPERIMENT).unwrap();
    let a = stacklab(&["run", "--config", "exp.json", "--out", "a", "--workers", "1"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = stacklab(&["run", "--config", "exp.json", "--out", "b", "--workers", "2"], dir.path());
    assert_eq!(code(&b), 0);
    let ra = fs::read(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(ra, fs::read(dir.path().join("b/results.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ra).lines().count(), 1 + 2 * 2 * 2);

    let again = stacklab(&["run", "--config", "exp.json", "--out", "a"], dir.path());
    assert!(text(&again).contains("already done"));
    assert_eq!(ra, fs::read(dir.path().join("a/results.csv")).unwrap());

    let seeded = stacklab(&["run", "--config", "exp.json", "--out", "c", "--seed", "6"], dir.path());
    assert_eq!(code(&seeded), 0);
    assert_ne!(ra, fs::read(dir.path().join("c/results.csv")).unwrap());

    let r = stacklab(&["report", "--results", "a/results.csv"], dir.path());
    assert_eq!(code(&r), 0);
    let md = text(&r);
    assert!(md.contains("| model | short | long |"), "{md}");
    assert!(md.contains("| lstm (n) |") && md.contains("| lstm (c) |"));
}

#[test]
fn empty_results_report_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.csv"), "task,model,mode,restart,bin,acc,ppl,n_seq,n_det\n").unwrap();
    let o = stacklab(&["report", "--results", "r.csv"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(text(&o), "");
}

#[test]
fn train_eval_and_stability_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"max_epochs": 1, "restarts": 2, "model": {"name": "jm-hidden", "hidden_size": 4},
                  "data": {"kind": "task", "task": "count3", "train_range": [6, 12],
                           "train_count": 20, "valid_count": 6}}"#;
    fs::write(dir.path().join("train.json"), cfg).unwrap();
    let t = stacklab(&["train", "--config", "train.json", "--out", "t", "--seed", "3"], dir.path());
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(text(&t).contains("best restart"));
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("t/best.json")).unwrap()).unwrap();
    assert_eq!(best["seed"].as_u64().unwrap(), 3 + best["restart"].as_u64().unwrap());

    let e = stacklab(
        &[
            "eval", "--checkpoint", "t/restart0.stk", "--task", "count3", "--bins", "a=6-15,b=16-30",
            "--per-bin", "5", "--results", "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("r.csv")).unwrap().lines().count(), 3);

    let s = stacklab(
        &[
            "stability", "--checkpoint", "t/restart0.stk", "--task", "count3", "--lengths", "6,9,12,18,24",
            "--per-length", "4", "--out", "s.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert!(rep["verdict"].is_string());
    assert!(rep["action_agreement"].is_number());
}

#[test]
fn stability_from_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("length,loss,stderr,n\n");
    for t in [50.0f64, 100.0, 200.0, 400.0, 800.0] {
        csv.push_str(&format!("{t},{},0.01,50\n", 0.001 * t.powf(1.5) + 0.1));
    }
    fs::write(dir.path().join("c.csv"), csv).unwrap();
    let o = stacklab(&["stability", "--curve", "c.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&text(&o)).unwrap();
    assert_eq!(rep["verdict"], "unstable");
    assert!((rep["growth"]["b"].as_f64().unwrap() - 1.5).abs() < 0.1);
}
