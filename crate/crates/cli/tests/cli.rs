use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 3,
  "data": {"train": 6, "dev": 2, "test": 3},
  "encoder": {"layers": 2, "d_model": 8, "heads": 2, "ff_dim": 16, "sctc_positions": [1, 2]},
  "sluhead": {"pred_dim": 6, "joint_dim": 5},
  "kt": {"teacher_width": 4},
  "stages": [
    {"kind": "asr_finetune_kt", "epochs": 1},
    {"kind": "slu_adapt_kt", "epochs": 1}
  ]
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointslu")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture(config: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let data = root.join("data");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Fixture {
        _dir: dir,
        root,
        config: cfg,
        data,
    }
}

fn trained(f: &Fixture) -> PathBuf {
    let out = f.root.join("run");
    let o = run(&["train", "--config", s(&f.config), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn verify_identities_passes() {
    let o = run(&["verify", "--suite", "identities"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}

#[test]
fn validation_errors_exit_1() {
    assert_eq!(code(&run(&["verify", "--suite", "bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "unknown_key": 2}"#).unwrap();
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn divergence_exits_3() {
    let cfg = TINY.replace(r#"{"kind": "asr_finetune_kt", "epochs": 1}"#, r#"{"kind": "asr_finetune_kt", "epochs": 2, "lr": 1e300}"#);
    let f = fixture(&cfg);
    let o = run(&["train", "--config", s(&f.config), "--out", s(&f.root.join("run"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_hashed_artifacts_and_stages_chain() {
    let f = fixture(TINY);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let out = trained(&f);
    for name in ["stage0.ckpt", "stage1.ckpt", "model.ckpt", "records.jsonl", "test_report.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let records = lines(&out.join("records.jsonl"));
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r["config_hash"] == hash.as_str()));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("test_report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash.as_str());
    assert_eq!(std::fs::read(out.join("stage1.ckpt")).unwrap(), std::fs::read(out.join("model.ckpt")).unwrap());

    // Later stages need an initial checkpoint.
    let o = run(&["train", "--config", s(&f.config), "--stage", "1", "--out", s(&f.root.join("x"))]);
    assert_eq!(code(&o), 1);
    // Running stage 1 from the stage-0 checkpoint reproduces the full run.
    let resumed = f.root.join("resumed");
    let o = run(&[
        "train",
        "--config",
        s(&f.config),
        "--stage",
        "1",
        "--init",
        s(&out.join("stage0.ckpt")),
        "--out",
        s(&resumed),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(resumed.join("model.ckpt")).unwrap(), std::fs::read(out.join("model.ckpt")).unwrap());
}

#[test]
fn decode_beam_one_equals_greedy_and_eval_scores() {
    let f = fixture(TINY);
    let out = trained(&f);
    let ckpt = out.join("model.ckpt");
    let greedy = f.root.join("greedy.jsonl");
    let beam1 = f.root.join("beam1.jsonl");
    let beam4 = f.root.join("beam4.jsonl");
    for (mode, k, path) in [("greedy", "1", &greedy), ("beam", "1", &beam1), ("beam", "4", &beam4)] {
        let o = run(&["decode", "--ckpt", s(&ckpt), "--data", s(&f.data), "--mode", mode, "--beam", k, "--out", s(path)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (g, b1, b4) = (lines(&greedy), lines(&beam1), lines(&beam4));
    assert_eq!(g.len(), 3);
    for ((a, b), c) in g.iter().zip(&b1).zip(&b4) {
        assert_eq!(a["tokens"], b["tokens"]);
        assert_eq!(a["score"], b["score"]);
        assert!(c["score"].as_f64().unwrap() >= a["score"].as_f64().unwrap());
    }

    let o = run(&["eval", "--hyp", s(&greedy), "--ref", s(&f.data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["precision", "recall", "slu_f1", "intent_acc", "wer"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v) || k == "wer", "{k}");
    }
    assert_eq!(m["config_hash"], g[0]["config_hash"]);
}

#[test]
fn eval_of_references_is_perfect_and_checks_vocab_hash() {
    let f = fixture(TINY);
    let test: Vec<Value> = lines(&f.data.join("test.jsonl"));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    let mut hyp = String::new();
    for r in &test {
        let text = r["text"].as_str().unwrap();
        let mut tokens = vec![format!("IN-{}", r["slu"]["intent"].as_str().unwrap())];
        for e in r["slu"]["entities"].as_array().unwrap() {
            tokens.extend(e["value"].as_str().unwrap().chars().map(String::from));
            tokens.push(format!("b-{}", e["type"].as_str().unwrap()));
        }
        let rec = serde_json::json!({
            "id": r["id"], "config_hash": "h", "vocab_hash": manifest["vocab_hash"],
            "mode": "greedy", "beam": 1, "output": "tags", "tokens": tokens, "score": 0.0,
            "intent": null, "entities": [], "transcript": text,
        });
        hyp.push_str(&format!("{rec}\n"));
    }
    let path = f.root.join("hyp.jsonl");
    std::fs::write(&path, &hyp).unwrap();
    let o = run(&["eval", "--hyp", s(&path), "--ref", s(&f.data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["precision", "recall", "slu_f1", "intent_acc"] {
        assert_eq!(m[k].as_f64(), Some(1.0), "{k}");
    }
    assert_eq!(m["wer"].as_f64(), Some(0.0));

    let vh = manifest["vocab_hash"].as_str().unwrap();
    std::fs::write(&path, hyp.replace(vh, "deadbeef")).unwrap();
    let o = run(&["eval", "--hyp", s(&path), "--ref", s(&f.data)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary hash"));
}

#[test]
fn align_dump_writes_three_matrices() {
    let f = fixture(TINY);
    let out = trained(&f);
    let test = lines(&f.data.join("test.jsonl"));
    let id = test[0]["id"].as_str().unwrap();
    let dump = f.root.join("align");
    let o = run(&["align-dump", "--ckpt", s(&out.join("model.ckpt")), "--data", s(&f.data), "--utt", id, "--out", s(&dump)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["rnnt_occupancy.csv", "ctc_posteriors.csv", "attention.csv"] {
        let text = std::fs::read_to_string(dump.join(name)).unwrap();
        assert!(text.starts_with("# config_hash="), "{name}");
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert!(!rows.is_empty());
        if name != "rnnt_occupancy.csv" {
            for r in rows {
                let sum: f64 = r.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-5, "{name}: {sum}");
            }
        }
    }
    let o = run(&["align-dump", "--ckpt", s(&out.join("model.ckpt")), "--data", s(&f.data), "--utt", "nope", "--out", s(&dump)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_csv() {
    let cfg = TINY.replace(
        r#"{"kind": "asr_finetune_kt", "epochs": 1},"#,
        "",
    );
    let f = fixture(&cfg);
    let grid = f.root.join("grid.json");
    std::fs::write(
        &grid,
        r#"{"cells": [{"name": "asr", "sctc_targets": ["asr", "asr"]}, {"name": "slu", "sctc_targets": ["slu", "slu"]}], "seeds": [1]}"#,
    )
    .unwrap();
    let csv = f.root.join("ablation.csv");
    let o = run(&["ablate", "--config", s(&f.config), "--grid", s(&grid), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# base_config_hash="));
    assert_eq!(text.lines().count(), 1 + 1 + 2 + 2);
}
