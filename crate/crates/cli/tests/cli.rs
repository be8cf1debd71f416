mod common;

use std::fs;

use serde_json::{json, Value};

use common::{data_config, kpdyn, read_tree, train_config, trained, write_json};

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(kpdyn(&["generate", "--frobnicate"]), 1);
    assert_eq!(kpdyn(&["no-such-command"]), 1);
    assert_eq!(kpdyn(&["eval", "--ckpt", "x.ckpt", "--data", "d", "--out", "o", "--samples", "0"]), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(kpdyn(&["eval", "--ckpt", "/nonexistent/final.ckpt", "--data", "/nonexistent", "--out", out.to_str().unwrap()]), 2);
    assert_eq!(kpdyn(&["generate", "--config", "/nonexistent/data.json", "--out", out.to_str().unwrap()]), 2);
}

#[test]
fn generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(kpdyn(&["generate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]), 0);
    assert_eq!(kpdyn(&["generate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]), 0);
    assert_eq!(read_tree(&a), read_tree(&b));
    let run = read_json(&a.join("run.json"));
    assert_eq!(run["command"], "generate");
    assert_eq!(run["seed"], 3);
    assert_eq!(run["dataset_manifest_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn generate_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("bad.json"), json!({"scene": {"num_objects": 2, "colour": "red"}}));
    assert_eq!(kpdyn(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]), 2);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let run = dir.path().join("run");
    let again = dir.path().join("again");
    let cfg = train_config(dir.path());
    assert_eq!(kpdyn(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", again.to_str().unwrap(), "--quiet"]), 0);
    assert_eq!(read_tree(&run), read_tree(&again));

    let info = read_json(&run.join("run.json"));
    assert_eq!(info["command"], "train");
    assert_eq!(info["checkpoint_sha256"].as_str().unwrap(), kpdyn_core::training::file_sha256(&ckpt).unwrap());
    assert!(info["versions"]["kpdyn"].is_string());

    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(run.join("metrics.csv"), resumed.join("metrics.csv")).unwrap();
    let mid = run.join("checkpoint_00000004.ckpt");
    assert_eq!(kpdyn(&["train", "--resume", mid.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", resumed.to_str().unwrap(), "--quiet"]), 0);
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(&ckpt).unwrap());
    assert_eq!(fs::read(resumed.join("metrics.csv")).unwrap(), fs::read(run.join("metrics.csv")).unwrap());
    assert_eq!(kpdyn(&["train", "--resume", mid.to_str().unwrap(), "--seed", "9", "--data", data.to_str().unwrap(), "--out", resumed.to_str().unwrap()]), 1);
}

#[test]
fn untrained_model_does_not_beat_the_static_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = trained(dir.path());
    let fresh = dir.path().join("fresh");
    assert_eq!(kpdyn(&["train", "--config", train_config(dir.path()).to_str().unwrap(), "--steps", "0", "--data", data.to_str().unwrap(), "--out", fresh.to_str().unwrap(), "--quiet"]), 0);
    let out = dir.path().join("eval");
    assert_eq!(kpdyn(&["eval", "--ckpt", fresh.join("final.ckpt").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--samples", "1"]), 0);
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["predicted_error_static"].as_f64().unwrap() <= summary["predicted_error_first_sample"].as_f64().unwrap());
}

#[test]
fn eval_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let out = dir.path().join("eval");
    let args = ["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--samples", "4"];
    assert_eq!(kpdyn(&args), 0);
    for f in ["curves.csv", "probe.json", "summary.json", "trajectory_error.svg", "pixel_metrics.svg", "run.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let summary = read_json(&out.join("summary.json"));
    let best = summary["predicted_error_best"].as_f64().unwrap();
    assert!(best <= summary["predicted_error_first_sample"].as_f64().unwrap());
    assert_eq!(summary["psnr"].as_array().unwrap().len(), 4);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 5);
    let first = read_tree(&out);
    assert_eq!(kpdyn(&args), 0);
    assert_eq!(read_tree(&out), first);
}

#[test]
fn rollout_and_manipulate_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let (ckpt, data) = (ckpt.to_str().unwrap(), data.to_str().unwrap());
    let roll = dir.path().join("roll");
    assert_eq!(kpdyn(&["rollout", "--ckpt", ckpt, "--data", data, "--seq", "1", "--samples", "2", "--out", roll.to_str().unwrap()]), 0);
    let csv = fs::read_to_string(roll.join("keypoints.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sample,step,keypoint,x,y,mu");
    assert_eq!(csv.lines().count(), 1 + 2 * 4 * 2);
    for f in ["truth.png", "sample_000.png", "sample_001.png", "run.json"] {
        assert!(roll.join(f).is_file(), "{f}");
    }
    assert_eq!(kpdyn(&["rollout", "--ckpt", ckpt, "--data", data, "--seq", "999", "--out", roll.to_str().unwrap()]), 1);

    let edits = write_json(&dir.path().join("edits.json"), json!({"sequence": 0, "edits": [{"t": 1, "k": 0, "x": 0.5, "y": -0.5}], "samples": 3, "predict_steps": 5}));
    let man = dir.path().join("man");
    assert_eq!(kpdyn(&["manipulate", "--ckpt", ckpt, "--data", data, "--edits", edits.to_str().unwrap(), "--out", man.to_str().unwrap()]), 0);
    let csv = fs::read_to_string(man.join("keypoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 7 * 2);
    let plain = write_json(&dir.path().join("plain.json"), json!({"sequence": 0, "edits": [], "samples": 3, "predict_steps": 5}));
    let base = dir.path().join("base");
    assert_eq!(kpdyn(&["manipulate", "--ckpt", ckpt, "--data", data, "--edits", plain.to_str().unwrap(), "--out", base.to_str().unwrap(), "--no-frames"]), 0);
    assert_ne!(fs::read_to_string(base.join("keypoints.csv")).unwrap(), csv);
    assert!(!base.join("truth.png").exists());

    let bad = write_json(&dir.path().join("bad.json"), json!({"sequence": 0, "edits": [{"t": 5, "k": 0, "x": 0.0, "y": 0.0}], "samples": 1, "predict_steps": 2}));
    assert_eq!(kpdyn(&["manipulate", "--ckpt", ckpt, "--data", data, "--edits", bad.to_str().unwrap(), "--out", man.to_str().unwrap()]), 2);
}
