//! Counterfactual conditioning: edit observed keypoints, re-run the dynamics
//! on the edited sequence and optionally decode the predicted frames.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ObservedFeed, RolloutRequest};
use crate::error::{Error, Result};
use crate::model::KeypointDynamicsModel;
use crate::vision::{Keypoint, KeypointSet, VideoSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointEdit {
    pub t: usize,
    pub k: usize,
    pub x: f64,
    pub y: f64,
    /// `None` keeps the detected scale.
    #[serde(default)]
    pub mu: Option<f64>,
}

/// Replace the listed observed keypoints. Edits apply in order; everything
/// else is copied unchanged.
pub fn apply_edits(observed: &[KeypointSet], edits: &[KeypointEdit]) -> Result<Vec<KeypointSet>> {
    let mut out = observed.to_vec();
    for (i, e) in edits.iter().enumerate() {
        if e.t >= observed.len() {
            return Err(Error::Edit(format!("edit {i}: step {} is not an observed step (0..{})", e.t, observed.len())));
        }
        let set = &mut out[e.t];
        if e.k >= set.len() {
            return Err(Error::Edit(format!("edit {i}: keypoint {} out of range (0..{})", e.k, set.len())));
        }
        if !(-1.0..=1.0).contains(&e.x) || !(-1.0..=1.0).contains(&e.y) {
            return Err(Error::Edit(format!("edit {i}: coordinates ({}, {}) outside [-1, 1]", e.x, e.y)));
        }
        let mu = e.mu.unwrap_or(set.points[e.k].mu);
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Edit(format!("edit {i}: scale {mu} must be finite and non-negative")));
        }
        set.points[e.k] = Keypoint::new(e.x, e.y, mu);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualOptions {
    pub predict_steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub feed: ObservedFeed,
    pub actions: Option<Vec<Vec<f64>>>,
}

impl CounterfactualOptions {
    pub fn new(predict_steps: usize, samples: usize, seed: u64) -> Self {
        Self { predict_steps, samples, seed, noise_scale: 1.0, feed: ObservedFeed::Decoded, actions: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    /// `samples x (T + ΔT)` decoded keypoints.
    pub keypoints: Vec<Vec<KeypointSet>>,
    /// `samples x ΔT` frames (`H x W x C`, clipped to `[0, 1]`) when requested.
    pub frames: Option<Vec<Vec<Vec<f32>>>>,
}

/// Run the posterior over the (edited) observed keypoints, then the prior.
/// With `reference` set, each sample's predicted steps are decoded against
/// the reference video's first frame and its unedited keypoints.
pub fn counterfactual_rollout(
    model: &KeypointDynamicsModel,
    edited: &[KeypointSet],
    opts: &CounterfactualOptions,
    reference: Option<(&VideoSequence, &KeypointSet)>,
) -> Result<CounterfactualResult> {
    if opts.samples == 0 {
        return Err(Error::Invalid("samples must be at least 1".into()));
    }
    let observed: Vec<Vec<f64>> = edited.iter().map(|s| s.to_vector()).collect();
    let mut req = RolloutRequest::new(&observed, opts.predict_steps, opts.samples, opts.seed);
    req.noise_scale = opts.noise_scale;
    req.feed = opts.feed;
    req.actions = opts.actions.as_deref();
    let roll = model.dynamics.rollout(&req)?;
    let keypoints: Vec<Vec<KeypointSet>> = roll
        .trajectories
        .iter()
        .map(|traj| traj.iter().map(|x| KeypointSet::from_vector(x)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let frames = match reference {
        None => None,
        Some((video, first)) => {
            let t_obs = edited.len();
            let mut all = Vec::with_capacity(opts.samples);
            for sample in &keypoints {
                let mut f = model.render(video, first, &sample[t_obs..])?;
                f.iter_mut().for_each(|img| img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)));
                all.push(f);
            }
            Some(all)
        }
    };
    Ok(CounterfactualResult { keypoints, frames })
}
