//! Single-file checkpoints: an 8-byte magic, the manifest length as a
//! little-endian u64, a JSON manifest, then raw little-endian arrays at the
//! offsets listed in the manifest.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HyperParams, MetricsAccumulator};
use crate::error::{Error, Result};
use crate::model::KeypointDynamicsModel;
use crate::nn::{Adam, Parameterized};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KPDYNCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub hyper: HyperParams,
    pub vision_optimizer_steps: u64,
    pub dynamics_optimizer_steps: u64,
    pub pending_metrics: MetricsAccumulator,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub model: KeypointDynamicsModel,
    pub vision_opt: Adam<f32>,
    pub dynamics_opt: Adam<f64>,
    /// Partially filled logging interval at the time of saving.
    pub pending_metrics: MetricsAccumulator,
}

struct Writer {
    entries: Vec<ArrayEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn push<T: Real>(&mut self, name: String, shape: &[usize], values: &[T]) {
        let offset = self.data.len() as u64;
        T::write_le(values, &mut self.data);
        self.entries.push(ArrayEntry { name, dtype: T::DTYPE.into(), shape: shape.to_vec(), offset, bytes: self.data.len() as u64 - offset });
    }

    fn model<T: Real, M: Parameterized<T> + ?Sized>(&mut self, prefix: &str, model: &M, opt: &Adam<T>) {
        let mut i = 0;
        model.visit(&mut |p| {
            self.push(format!("{prefix}/{}", p.name), &p.shape, &p.value);
            self.push(format!("{prefix}.adam_m/{}", p.name), &p.shape, &opt.first[i]);
            self.push(format!("{prefix}.adam_v/{}", p.name), &p.shape, &opt.second[i]);
            i += 1;
        });
    }
}

struct Reader<'a> {
    index: HashMap<&'a str, &'a ArrayEntry>,
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn get<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let e = self.index.get(name).ok_or_else(|| Error::format(name, "missing from checkpoint"))?;
        if e.dtype != T::DTYPE {
            return Err(Error::format(name, format!("dtype {} where {} expected", e.dtype, T::DTYPE)));
        }
        if e.shape != shape {
            return Err(Error::format(name, format!("shape {:?} where {:?} expected", e.shape, shape)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if end > self.data.len() || e.bytes as usize != shape.iter().product::<usize>() * std::mem::size_of::<T>() {
            return Err(Error::format(name, "byte range does not match the array size"));
        }
        Ok(T::read_le(&self.data[start..end]))
    }

    fn model<T: Real, M: Parameterized<T> + ?Sized>(&self, prefix: &str, model: &mut M, opt: &mut Adam<T>) -> Result<()> {
        let mut err = None;
        let mut i = 0;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let load = || -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
                Ok((
                    self.get(&format!("{prefix}/{}", p.name), &p.shape)?,
                    self.get(&format!("{prefix}.adam_m/{}", p.name), &p.shape)?,
                    self.get(&format!("{prefix}.adam_v/{}", p.name), &p.shape)?,
                ))
            };
            match load() {
                Ok((v, m, s)) => {
                    p.value = v;
                    opt.first[i] = m;
                    opt.second[i] = s;
                }
                Err(e) => err = Some(e),
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer { entries: Vec::new(), data: Vec::new() };
        w.model("vision", &self.model.vision, &self.vision_opt);
        w.model("dynamics", &self.model.dynamics, &self.dynamics_opt);
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            step: self.step,
            seed: self.model.hyper.seed,
            hyper: self.model.hyper.clone(),
            vision_optimizer_steps: self.vision_opt.steps,
            dynamics_optimizer_steps: self.dynamics_opt.steps,
            pending_metrics: self.pending_metrics.clone(),
            arrays: w.entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + w.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        if 16 + len > bytes.len() {
            return Err(Error::format("manifest", "truncated"));
        }
        let value: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len])?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::format("version", "missing"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::UnsupportedVersion { found: version.min(u32::MAX as u64) as u32, supported: CHECKPOINT_VERSION });
        }
        let manifest: CheckpointManifest = serde_json::from_value(value)?;
        let mut model = KeypointDynamicsModel::new(manifest.hyper.clone())?;
        let adam = manifest.hyper.adam_config();
        let mut vision_opt = Adam::new(adam, &model.vision);
        let mut dynamics_opt = Adam::new(adam, &model.dynamics);
        let reader = Reader { index: manifest.arrays.iter().map(|e| (e.name.as_str(), e)).collect(), data: &bytes[16 + len..] };
        reader.model("vision", &mut model.vision, &mut vision_opt)?;
        reader.model("dynamics", &mut model.dynamics, &mut dynamics_opt)?;
        vision_opt.steps = manifest.vision_optimizer_steps;
        dynamics_opt.steps = manifest.dynamics_optimizer_steps;
        Ok(Self { step: manifest.step, model, vision_opt, dynamics_opt, pending_metrics: manifest.pending_metrics })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
