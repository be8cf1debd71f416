//! Synthetic bouncing-dot videos with ground-truth object coordinates, and
//! the on-disk dataset format.

mod format;
mod scene;

pub use format::{read_dataset, write_dataset, Manifest, FORMAT_VERSION};
pub use scene::{
    generate_action_conditioned, generate_bouncing_dots, render_frame, sequence_seed, simulate_dots, ActionSettings, SceneConfig, SplitSizes,
};

use crate::error::Result;
use crate::vision::VideoSequence;

/// Ground truth for one sequence. Coordinates use the same normalized
/// `[-1, 1]` convention as detected keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `T x objects` of `[x, y]`.
    pub coords: Vec<Vec<[f64; 2]>>,
    /// `T x A`; entry `t` is the action that moved the scene into frame `t`.
    pub actions: Option<Vec<Vec<f64>>>,
    pub label: Option<i32>,
    /// One reward per frame.
    pub rewards: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub seed: u64,
    /// `T x H x W x C` bytes.
    pub frames: Vec<u8>,
    pub trajectory: TrajectoryRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_objects: usize,
    pub action_size: usize,
    pub sequences: Vec<SequenceRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub root_seed: u64,
    pub scene: Option<SceneConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Frames of sequence `i` scaled to `[0, 1]`.
    pub fn video(&self, i: usize) -> Result<VideoSequence> {
        VideoSequence::from_bytes(self.frames, self.height, self.width, self.channels, &self.sequences[i].frames)
    }

    /// Frames `start..start + len` of sequence `i` scaled to `[0, 1]`.
    pub fn window(&self, i: usize, start: usize, len: usize) -> Vec<f32> {
        let fl = self.height * self.width * self.channels;
        self.sequences[i].frames[start * fl..(start + len) * fl].iter().map(|&b| b as f32 / 255.0).collect()
    }
}
