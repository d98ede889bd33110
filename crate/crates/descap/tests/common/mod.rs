#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_descap"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env_remove("IIT_TRAINER_THREADS").env_remove("RUST_LOG");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "descap {args:?} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A small synthetic dataset plus a run config with a tiny model, written
/// into `dir`; returns the config path.
pub fn small_workspace(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        json!({
            "n_train": 48, "n_val": 12, "n_test": 12, "zeroshot_per_class": 2,
            "n_human_eval": 12, "seed": 5
        })
        .to_string(),
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let config = data.join("run.json");
    let mut v: Value = serde_json::from_slice(&std::fs::read(&config).unwrap()).unwrap();
    v["model"]["d_model"] = json!(16);
    v["model"]["n_layers"] = json!(2);
    v["model"]["n_heads"] = json!(2);
    v["pretrain"]["epochs"] = json!(1);
    v["train"]["epochs"] = json!(2);
    v["train"]["learning_rate"] = json!(1e-3);
    v["lora"]["rank"] = json!(4);
    std::fs::write(&config, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    config
}

/// Every regular file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
