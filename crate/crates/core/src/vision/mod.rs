//! Frame encoder and decoder with a keypoint bottleneck.
//!
//! The detector maps a frame to `K` positive score maps at quarter
//! resolution; each map is condensed to an `(x, y, μ)` keypoint. The
//! reconstructor redraws the keypoints as Gaussian blobs, concatenates them
//! with the first frame's blobs and appearance features, and predicts the
//! difference to the first frame.

pub mod keypoints;
mod model;

pub use keypoints::{keypoint_from_map, keypoint_from_map_backward, normalize_map, pixel_center, render_blob, render_blob_backward, to_pixel_units, Keypoint};
pub use model::{KeypointAutoencoder, VisionConfig, VisionTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T` frames of `H x W x C` values in `[0, 1]`, stored frame-major then
/// row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoSequence {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Invalid("video needs at least one frame".into()));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "video data has {} values, expected {frames}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { frames, height, width, channels, data })
    }

    pub fn from_bytes(frames: usize, height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(frames, height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> VideoSequence {
        let n = self.frame_len();
        VideoSequence {
            frames: len,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }
}

/// Raw and channel-normalised detection maps of one frame, each `K x Hm x Wm`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMaps {
    pub num_keypoints: usize,
    pub height: usize,
    pub width: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl DetectionMaps {
    pub fn from_raw(num_keypoints: usize, height: usize, width: usize, raw: Vec<f64>) -> Self {
        let hw = height * width;
        let normalized = raw.chunks(hw).flat_map(normalize_map).collect();
        Self { num_keypoints, height, width, raw, normalized }
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.raw[k * hw..(k + 1) * hw]
    }

    /// Keypoints by spatial expectation of each channel.
    pub fn keypoints(&self) -> KeypointSet {
        let points = (0..self.num_keypoints)
            .map(|k| {
                let (x, y, mu) = keypoint_from_map(self.channel(k), self.height, self.width);
                Keypoint::new(x, y, mu)
            })
            .collect();
        KeypointSet { points }
    }
}

/// `K` keypoints of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `(x, y, μ)` triples.
    pub fn to_vector(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.mu]).collect()
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(3) {
            return Err(Error::Shape(format!("keypoint vector length {} is not a multiple of 3", v.len())));
        }
        Ok(Self { points: v.chunks(3).map(|c| Keypoint::new(c[0], c[1], c[2])).collect() })
    }

    /// Coordinates in `[-1, 1]` and `μ ≥ 0`.
    pub fn is_valid(&self) -> bool {
        self.points.iter().all(|p| (-1.0..=1.0).contains(&p.x) && (-1.0..=1.0).contains(&p.y) && p.mu >= 0.0)
    }
}

/// Gaussian blob maps for a keypoint set, `K x h x w` row-major.
pub fn render_blobs(keypoints: &KeypointSet, resolution: (usize, usize), sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("blob sigma must be positive, got {sigma}")));
    }
    let (h, w) = resolution;
    let mut out = vec![0.0; keypoints.len() * h * w];
    for (k, p) in keypoints.points.iter().enumerate() {
        render_blob((p.x, p.y, p.mu), h, w, sigma, &mut out[k * h * w..(k + 1) * h * w]);
    }
    Ok(out)
}
