use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wlac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wlac"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run wlac")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = wlac(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last = stdout.lines().last().expect("one summary line");
    serde_json::from_str(last).expect("summary is JSON")
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(stderr.lines().last().unwrap()).expect("error is JSON")
}

const CORPUS: &str = "ein haus\ta house\n\
das haus ist gross\tthe house is big\n\
das ist ein haus\tthat is a house\n\
ein grosses haus\ta big house\n\
das ist gut\tthat is good\n";

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.tsv"), CORPUS).unwrap();
    let run = |out: &str| {
        ok(
            dir.path(),
            &["simulate", "--corpus", "c.tsv", "--out", out, "--instances", "50", "--seed", "7"],
        );
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("a.jsonl");
    let b = run("b.jsonl");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 50);
    let c = {
        ok(
            dir.path(),
            &["simulate", "--corpus", "c.tsv", "--out", "c.jsonl", "--instances", "50", "--seed", "8"],
        );
        std::fs::read(dir.path().join("c.jsonl")).unwrap()
    };
    assert_ne!(b, c);
}

#[test]
fn train_energy_without_baseline_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wlac(dir.path(), &["train-energy", "--train", "x.jsonl", "--out", "e.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_of(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--baseline"));
}

#[test]
fn unknown_subcommand_and_missing_files_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = wlac(dir.path(), &["frobnicate"]);
    assert_eq!(error_of(&out)["error"], "usage");

    let out = wlac(dir.path(), &["build-vocab", "--corpus", "missing.tsv", "--src-out", "s", "--tgt-out", "t"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "io");
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"train": {"lr": -1.0}}"#).unwrap();
    std::fs::write(dir.path().join("c.tsv"), CORPUS).unwrap();
    let out = wlac(
        dir.path(),
        &[
            "pretrain", "--config", "cfg.json", "--corpus", "c.tsv", "--src-vocab", "s", "--tgt-vocab", "t", "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(error_of(&out)["error"], "usage");
}

/// Runs every stage on a small synthetic corpus with a tiny model.
#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = r#"{
        "model": {"d_model": 16, "d_ffn": 32, "n_heads": 2, "n_src_layers": 1, "n_tgt_layers": 1, "dropout": 0.0},
        "train": {"lr": 0.003, "warmup_steps": 5, "batch_tokens": 512, "eval_interval": 10}
    }"#;
    std::fs::write(d.join("cfg.json"), config).unwrap();
    let summary = ok(
        d,
        &["gen-synthetic", "--out-dir", "syn", "--train-pairs", "300", "--heldout-pairs", "40", "--instances", "300"],
    );
    assert_eq!(summary["train_pairs"], 300);
    for f in ["train.tsv", "heldout.tsv", "train.jsonl", "heldout.jsonl", "heldout.align.jsonl", "language.json"] {
        assert!(d.join("syn").join(f).exists(), "{f}");
    }
    let v = ok(
        d,
        &["build-vocab", "--corpus", "syn/train.tsv", "--src-out", "src.vocab", "--tgt-out", "tgt.vocab"],
    );
    assert_eq!(v["pairs"], 300);
    let common = ["--config", "cfg.json", "--seed", "3", "--steps", "20"];
    let mut args = vec![
        "pretrain", "--corpus", "syn/train.tsv", "--src-vocab", "src.vocab", "--tgt-vocab", "tgt.vocab", "--out",
        "cmblm.ckpt", "--metrics", "cmblm.jsonl",
    ];
    args.extend(common);
    ok(d, &args);
    let metrics = std::fs::read_to_string(d.join("cmblm.jsonl")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);

    let mut args = vec![
        "train-baseline", "--init", "cmblm.ckpt", "--train", "syn/train.jsonl", "--valid", "syn/heldout.jsonl", "--out",
        "base.ckpt",
    ];
    args.extend(common);
    let b = ok(d, &args);
    assert!(b["final"]["val_accuracy_by_type"]["overall"].is_number());

    let mut args = vec![
        "train-energy", "--baseline", "base.ckpt", "--cmblm", "cmblm.ckpt", "--train", "syn/train.jsonl", "--negatives",
        "topk:4", "--out", "energy.ckpt",
    ];
    args.extend(common);
    ok(d, &args);

    let report = ok(
        d,
        &[
            "evaluate", "--baseline", "base.ckpt", "--energy", "energy.ckpt", "--data", "syn/heldout.jsonl",
            "--alignments", "syn/heldout.align.jsonl", "--latency-samples", "5", "--out", "report.json",
        ],
    );
    assert!(report["accuracy"]["overall"].is_number());
    assert!(report["baseline_accuracy"]["overall"].is_number());
    let recall = report["recall_at_k"].as_array().unwrap();
    assert_eq!(recall.len(), 6);
    let last = &report["alignment_recall"]["curve"];
    assert!(last.is_array());
    assert!(d.join("report.json").exists());

    let oracle = ok(d, &["keystroke-sim", "--episodes", "syn/heldout.jsonl", "--mode", "oracle"]);
    assert_eq!(oracle["average"], 2.0);
    let none = ok(d, &["keystroke-sim", "--episodes", "syn/heldout.jsonl", "--mode", "none"]);
    let model = ok(
        d,
        &[
            "keystroke-sim", "--episodes", "syn/heldout.jsonl", "--baseline", "base.ckpt", "--energy", "energy.ckpt",
        ],
    );
    assert_eq!(model["episodes"], none["episodes"]);
    assert!(model["average"].as_f64().unwrap() <= none["average"].as_f64().unwrap());

    // the energy checkpoint cannot stand in for a baseline
    let out = wlac(d, &["evaluate", "--baseline", "energy.ckpt", "--data", "syn/heldout.jsonl"]);
    assert_eq!(error_of(&out)["error"], "usage");
}
