use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_localmamba"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l}: {e}")))
        .collect()
}

const TINY: &str = r#"{
  "model": {"kind": "local_vim", "image_size": 16, "patch_size": 4, "dims": [8], "depths": [1],
            "num_classes": 4, "state_size": 2, "reduction": 4, "windows": [2, 4]},
  "train": {"lr": 0.001, "epochs": 1, "batch": 16},
  "search": {"epochs": 1, "supernet_dim": 8},
  "data": {"kind": "synth", "grid_cells": 4, "classes": 4, "samples": 48}
}"#;

#[test]
fn inspect_reports_counts_and_targets() {
    let out = bin().arg("inspect").arg(configs().join("localvim_t.json")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["preset"], "localvim_t");
    assert!(v["params"].as_u64().unwrap() > 8_000_000);
    assert_eq!(v["target"]["params"].as_f64().unwrap(), 8e6);
    assert!(v["flops"].as_f64().unwrap() > 1e9);
    assert!(v["params_by_module"].is_object());
}

#[test]
fn verify_passes() {
    let out = bin().arg("verify").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let checks = lines(&out);
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["pass"] == true));
}

#[test]
fn errors_exit_nonzero() {
    let out = bin().args(["train", "does_not_exist.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does_not_exist.json"));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("train").arg(configs().join("localvim_t.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().arg("train").arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let events = lines(&out);
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 1);
    let ckpt = out_dir.join("model.lmck");
    assert!(ckpt.exists());
    let done = events.last().unwrap();
    let out = bin().arg("eval").arg(&cfg).arg("--ckpt").arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ev = &lines(&out)[0];
    assert_eq!(ev["top1"], done["val"]["top1"]);
}

#[test]
fn search_layout_feeds_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().arg("search").arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let layout_path = out_dir.join("directions.json");
    let layout: Value = serde_json::from_str(&std::fs::read_to_string(&layout_path).unwrap()).unwrap();
    let blocks = layout["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0]["directions"].as_array().unwrap().len(), 4);
    assert!(out_dir.join("directions.txt").exists());

    let out = bin()
        .arg("train")
        .arg(&cfg)
        .arg("--directions")
        .arg(&layout_path)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&out)[0]["blocks"], 1);
}
