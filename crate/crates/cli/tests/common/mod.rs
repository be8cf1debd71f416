#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use kpdyn_core::HyperParams;
use serde_json::json;

pub fn kpdyn(args: &[&str]) -> i32 {
    kpdyn_cli::run(std::iter::once("kpdyn").chain(args.iter().copied()))
}

pub fn write_json(path: &Path, value: serde_json::Value) -> PathBuf {
    fs::write(path, value.to_string()).unwrap();
    path.to_path_buf()
}

pub fn data_config(dir: &Path) -> PathBuf {
    write_json(
        &dir.join("data.json"),
        json!({"scene": {"num_objects": 2, "object_radius": 1.5, "image_size": 16, "sequence_length": 6, "seed": 3}, "train": 8, "test": 3}),
    )
}

/// Small enough to train in well under a second.
pub fn tiny_hyper() -> HyperParams {
    HyperParams {
        num_keypoints: 2,
        observed_steps: 2,
        predicted_steps: 2,
        batch_size: 2,
        total_steps: 6,
        latent_size: 2,
        prior_net_size: 4,
        posterior_net_size: 4,
        decoder_net_size: 4,
        rnn_units: 4,
        bom_samples: 3,
        image_size: 16,
        widths: vec![4],
        extra_layers_per_scale: 0,
        appearance_features: 2,
        log_interval: 2,
        checkpoint_interval: 4,
        ..HyperParams::default()
    }
}

pub fn train_config(dir: &Path) -> PathBuf {
    write_json(&dir.join("train.json"), serde_json::to_value(tiny_hyper()).unwrap())
}

/// Generates a dataset and trains a tiny model; returns `(data_dir, checkpoint)`.
pub fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    assert_eq!(kpdyn(&["generate", "--config", data_config(dir).to_str().unwrap(), "--out", data.to_str().unwrap()]), 0);
    assert_eq!(kpdyn(&["train", "--config", train_config(dir).to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--quiet"]), 0);
    (data, run.join("final.ckpt"))
}

pub fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
