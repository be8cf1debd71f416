//! Directory layout: `manifest.json` plus raw little-endian arrays
//! `frames.u8`, `coords.f32` and, when present, `actions.f32`,
//! `rewards.f32` and `labels.i32`. Sequences are stored back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SceneConfig, SequenceRecord, TrajectoryRecord};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayInfo {
    pub file: String,
    pub dtype: String,
    /// Per-sequence shape; the leading sequence axis is implicit.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_objects: usize,
    pub action_size: usize,
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub arrays: Vec<ArrayInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
}

impl Manifest {
    fn array(&self, file: &str) -> Option<&ArrayInfo> {
        self.arrays.iter().find(|a| a.file == file)
    }
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, m, a) = (dataset.frames, dataset.num_objects, dataset.action_size);
    let mut arrays = vec![
        ArrayInfo { file: "frames.u8".into(), dtype: "u8".into(), shape: vec![t, dataset.height, dataset.width, dataset.channels] },
        ArrayInfo { file: "coords.f32".into(), dtype: "f32".into(), shape: vec![t, m, 2] },
    ];
    let frames: Vec<u8> = dataset.sequences.iter().flat_map(|s| s.frames.iter().copied()).collect();
    write_file(&dir.join("frames.u8"), &frames)?;
    write_file(&dir.join("coords.f32"), &f32_bytes(dataset.sequences.iter().flat_map(|s| s.trajectory.coords.iter().flatten().flatten().copied())))?;
    let all = |f: fn(&TrajectoryRecord) -> bool| !dataset.sequences.is_empty() && dataset.sequences.iter().all(|s| f(&s.trajectory));
    let any = |f: fn(&TrajectoryRecord) -> bool| dataset.sequences.iter().any(|s| f(&s.trajectory));
    for (name, present, complete) in [
        ("actions", any(|r| r.actions.is_some()), all(|r| r.actions.is_some())),
        ("rewards", any(|r| r.rewards.is_some()), all(|r| r.rewards.is_some())),
        ("labels", any(|r| r.label.is_some()), all(|r| r.label.is_some())),
    ] {
        if present && !complete {
            return Err(Error::Invalid(format!("{name} must be present for every sequence or none")));
        }
    }
    if all(|r| r.actions.is_some()) {
        arrays.push(ArrayInfo { file: "actions.f32".into(), dtype: "f32".into(), shape: vec![t, a] });
        write_file(&dir.join("actions.f32"), &f32_bytes(dataset.sequences.iter().flat_map(|s| s.trajectory.actions.iter().flatten().flatten().copied())))?;
    }
    if all(|r| r.rewards.is_some()) {
        arrays.push(ArrayInfo { file: "rewards.f32".into(), dtype: "f32".into(), shape: vec![t] });
        write_file(&dir.join("rewards.f32"), &f32_bytes(dataset.sequences.iter().flat_map(|s| s.trajectory.rewards.iter().flatten().copied())))?;
    }
    if all(|r| r.label.is_some()) {
        arrays.push(ArrayInfo { file: "labels.i32".into(), dtype: "i32".into(), shape: vec![] });
        let bytes: Vec<u8> = dataset.sequences.iter().flat_map(|s| s.trajectory.label.unwrap_or(0).to_le_bytes()).collect();
        write_file(&dir.join("labels.i32"), &bytes)?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        num_sequences: dataset.sequences.len(),
        frames: t,
        height: dataset.height,
        width: dataset.width,
        channels: dataset.channels,
        num_objects: m,
        action_size: a,
        root_seed: dataset.root_seed,
        seeds: dataset.sequences.iter().map(|s| s.seed).collect(),
        train: dataset.train.clone(),
        test: dataset.test.clone(),
        arrays,
        scene: dataset.scene.clone(),
    };
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn read_array(dir: &Path, manifest: &Manifest, file: &str, elem: usize) -> Result<Option<Vec<u8>>> {
    let Some(info) = manifest.array(file) else { return Ok(None) };
    let expected_dtype = &file[file.rfind('.').map(|i| i + 1).unwrap_or(0)..];
    if info.dtype != expected_dtype {
        return Err(Error::format(file, format!("dtype {} does not match {expected_dtype}", info.dtype)));
    }
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest.num_sequences * info.shape.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::format(file, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(Some(bytes))
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
}

fn check_shape(manifest: &Manifest, file: &str, shape: &[usize]) -> Result<()> {
    match manifest.array(file) {
        Some(info) if info.shape != shape => Err(Error::format(file, format!("shape {:?} does not match header {:?}", info.shape, shape))),
        _ => Ok(()),
    }
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::format("version", "missing or not an integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion { found: version.min(u32::MAX as u64) as u32, supported: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    let (n, t, m, a) = (manifest.num_sequences, manifest.frames, manifest.num_objects, manifest.action_size);
    if manifest.seeds.len() != n {
        return Err(Error::format("seeds", format!("expected {n} entries, found {}", manifest.seeds.len())));
    }
    for (name, ids) in [("train", &manifest.train), ("test", &manifest.test)] {
        if ids.iter().any(|&i| i >= n) {
            return Err(Error::format(name, "sequence index out of range"));
        }
    }
    check_shape(&manifest, "frames.u8", &[t, manifest.height, manifest.width, manifest.channels])?;
    check_shape(&manifest, "coords.f32", &[t, m, 2])?;
    check_shape(&manifest, "actions.f32", &[t, a])?;
    check_shape(&manifest, "rewards.f32", &[t])?;
    check_shape(&manifest, "labels.i32", &[])?;
    let frames = read_array(dir, &manifest, "frames.u8", 1)?.ok_or_else(|| Error::format("frames.u8", "missing from manifest"))?;
    let coords = f32_values(&read_array(dir, &manifest, "coords.f32", 4)?.ok_or_else(|| Error::format("coords.f32", "missing from manifest"))?);
    let actions = read_array(dir, &manifest, "actions.f32", 4)?.map(|b| f32_values(&b));
    let rewards = read_array(dir, &manifest, "rewards.f32", 4)?.map(|b| f32_values(&b));
    let labels: Option<Vec<i32>> = read_array(dir, &manifest, "labels.i32", 4)?.map(|b| b.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());

    let fl = t * manifest.height * manifest.width * manifest.channels;
    let sequences = (0..n)
        .map(|i| {
            let c = &coords[i * t * m * 2..(i + 1) * t * m * 2];
            SequenceRecord {
                seed: manifest.seeds[i],
                frames: frames[i * fl..(i + 1) * fl].to_vec(),
                trajectory: TrajectoryRecord {
                    coords: (0..t).map(|s| (0..m).map(|o| [c[(s * m + o) * 2], c[(s * m + o) * 2 + 1]]).collect()).collect(),
                    actions: actions.as_ref().map(|v| (0..t).map(|s| v[(i * t + s) * a..(i * t + s + 1) * a].to_vec()).collect()),
                    label: labels.as_ref().map(|l| l[i]),
                    rewards: rewards.as_ref().map(|r| r[i * t..(i + 1) * t].to_vec()),
                },
            }
        })
        .collect();
    Ok(Dataset {
        frames: t,
        height: manifest.height,
        width: manifest.width,
        channels: manifest.channels,
        num_objects: m,
        action_size: a,
        sequences,
        train: manifest.train,
        test: manifest.test,
        root_seed: manifest.root_seed,
        scene: manifest.scene,
    })
}
