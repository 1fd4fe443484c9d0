//! Runs the `agman` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_agman");

pub fn agman(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("AGMAN_LOG", "error")
        .output()
        .expect("agman binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A three-attribute synthetic configuration with short training, written to
/// `dir/config.json`; manifests live under `dir/data`.
pub fn write_config(dir: &Path, seed: u64) -> PathBuf {
    let config = serde_json::json!({
        "attributes": [
            {"name": "collar", "sub_classes": 4},
            {"name": "sleeve", "sub_classes": 3},
            {"name": "length", "sub_classes": 2}
        ],
        "data": {"train_manifest": "data/train.jsonl", "eval_manifest": "data/eval.jsonl"},
        "synth": {"per_subclass": 4},
        "train": {"epochs": 2, "triplets_per_epoch": 48},
        "seed": seed
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let out = agman(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("`agman {}` exited {}: {}", args.join(" "), code(&out), stderr(&out)))
    }
}

/// synth-data, train and eval-map inside `dir`. Returns the bytes of the
/// written MAP report.
pub fn pipeline(dir: &Path, seed: u64) -> Result<Vec<u8>, String> {
    let config = write_config(dir, seed);
    let config = config.to_str().unwrap();
    let data = dir.join("data");
    let checkpoint = dir.join("checkpoint");
    run_ok(&["synth-data", "--config", config, "--out", data.to_str().unwrap()])?;
    run_ok(&["train", "--config", config, "--out", checkpoint.to_str().unwrap()])?;
    run_ok(&["eval-map", "--checkpoint", checkpoint.to_str().unwrap()])?;
    std::fs::read(checkpoint.join("eval_map.json")).map_err(|e| e.to_string())
}
