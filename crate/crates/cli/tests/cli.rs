use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dgrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgrec"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

const TINY: &str = r#"{
  "dataset": "tiny",
  "synth": { "n_items": 60, "n_users": 120, "seq_len": 6, "n_clusters": 6, "dim": 16 },
  "tokenizer": { "heads": 2, "codebook_size": 8, "sub_dim": 4, "hidden": [32], "epochs": 30, "batch_size": 64 },
  "predictor": { "layers": 1, "d_model": 16, "heads": 2, "ffn_dim": 32, "max_items": 4 },
  "train": { "epochs": 2, "batch_size": 32, "targets": "random" },
  "decode": { "T": 2, "B": 4, "k": 4 },
  "eval": { "valid_users": 20, "test_users": 30 }
}"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn evaluate_without_checkpoint_is_a_validation_error() {
    let dir = tiny_dir();
    let out = dgrec(dir.path(), &["evaluate", "--config", "tiny.json"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "validation");
    assert!(e["message"].as_str().unwrap().contains("model.ckpt"), "{e}");
}

#[test]
fn synthetic_data_is_reproducible() {
    let dir = tiny_dir();
    let run = |sub: &str| {
        let args = [
            "synth-data",
            "--config",
            "tiny.json",
            "--seed",
            "7",
            &format!("paths.interactions={sub}/i.jsonl"),
            &format!("paths.embeddings={sub}/e.bin"),
            &format!("paths.labels={sub}/l.jsonl"),
        ];
        let out = dgrec(dir.path(), &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        ["i.jsonl", "e.bin", "l.jsonl"].map(|f| std::fs::read(dir.path().join(sub).join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    let dir = tiny_dir();
    for args in [
        vec!["train", "--config", "tiny.json", "decode.nope=1"],
        vec!["train", "--config", "tiny.json", "decode.T=3"],
        vec!["train", "--config", "missing.json"],
        vec!["frobnicate"],
        vec!["train", "loose-argument"],
    ] {
        let out = dgrec(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(error_json(&out)["error"], "validation");
    }
}

#[test]
fn full_pipeline_and_ablation() {
    let dir = tiny_dir();
    for cmd in ["synth-data", "train-tokenizer", "tokenize", "train", "evaluate", "decode"] {
        let out = dgrec(dir.path(), &[cmd, "--config", "tiny.json", "--threads", "1"]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = dir.path().join("run");
    for f in ["tokenizer.ckpt", "sids.jsonl", "model.ckpt", "train_log.csv", "results.csv", "generations.jsonl", "manifest.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "decode");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(manifest["version"].is_string());
    let echoed: Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["decode"]["T"], 2);
    assert_eq!(echoed["tokenizer"]["seed"], echoed["seed"]);

    let first = std::fs::read(run.join("results.csv")).unwrap();
    let out = dgrec(dir.path(), &["evaluate", "--config", "tiny.json"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(run.join("results.csv")).unwrap(), first);

    let out = dgrec(dir.path(), &["ablate", "--config", "tiny.json", "train.epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(run.join("results.csv")).unwrap();
    // 3 orders + divisors {1, 2} of M = 2 + 4 attention patterns
    assert_eq!(table.lines().count(), 1 + 3 + 2 + 4);
}
