use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceRecord, TrajectoryRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    /// Disk radius in pixels.
    pub object_radius: f64,
    pub palette: Vec<[u8; 3]>,
    /// Inclusive speed bounds in pixels per frame.
    pub speed_range: [f64; 2],
    pub turn_probability: f64,
    pub sequence_length: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 3,
            object_radius: 4.0,
            palette: vec![[255, 64, 64], [64, 255, 64], [64, 128, 255], [255, 255, 64], [255, 64, 255], [64, 255, 255]],
            speed_range: [1.0, 2.5],
            turn_probability: 0.05,
            sequence_length: 16,
            image_size: 64,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 || self.sequence_length == 0 || self.image_size == 0 {
            return Err(Error::Config("scene needs objects, frames and a positive image size".into()));
        }
        if !(self.object_radius > 0.0) || 2.0 * self.object_radius >= self.image_size as f64 {
            return Err(Error::Config(format!("object radius {} does not fit a {} pixel frame", self.object_radius, self.image_size)));
        }
        if self.palette.len() < self.num_objects {
            return Err(Error::Config(format!("palette has {} colors for {} objects", self.palette.len(), self.num_objects)));
        }
        for (i, a) in self.palette[..self.num_objects].iter().enumerate() {
            if self.palette[..i].contains(a) {
                return Err(Error::Config("object colors must be distinct".into()));
            }
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config("speed range must satisfy 0 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.turn_probability) {
            return Err(Error::Config("turn probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        (self.object_radius - 0.5, self.image_size as f64 - 0.5 - self.object_radius)
    }
}

/// Settings for the variant where object 0 is pushed by random accelerations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionSettings {
    /// Each action component is uniform in `[-max_action, max_action]`
    /// pixels per frame squared.
    pub max_action: f64,
    /// Goal position in normalized coordinates.
    pub goal: [f64; 2],
}

impl Default for ActionSettings {
    fn default() -> Self {
        Self { max_action: 0.5, goal: [0.0, 0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

/// Seed of sequence `index` under a root seed (SplitMix64 finalizer).
pub fn sequence_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    // Loop covers steps longer than the box.
    for _ in 0..64 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            return;
        }
    }
    *p = p.clamp(lo, hi);
}

/// Object centres in pixel units (`T x objects`) and velocities, optionally
/// pushing object 0 by `actions[t]` before the move into frame `t`.
pub fn simulate_dots(config: &SceneConfig, seed: u64, actions: Option<&[[f64; 2]]>) -> Result<(Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.bounds();
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(config.num_objects);
    let mut vel: Vec<[f64; 2]> = Vec::with_capacity(config.num_objects);
    for _ in 0..config.num_objects {
        pos.push([rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]);
        let speed = rng.gen_range(config.speed_range[0]..=config.speed_range[1]);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        vel.push([speed * heading.cos(), speed * heading.sin()]);
    }
    let mut positions = vec![pos.clone()];
    let mut velocities = vec![vel.clone()];
    for t in 1..config.sequence_length {
        for o in 0..config.num_objects {
            if config.turn_probability > 0.0 && rng.gen::<f64>() < config.turn_probability {
                let speed = vel[o][0].hypot(vel[o][1]);
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                vel[o] = [speed * heading.cos(), speed * heading.sin()];
            }
            if o == 0 {
                if let Some(a) = actions {
                    vel[0][0] += a[t][0];
                    vel[0][1] += a[t][1];
                }
            }
            for d in 0..2 {
                pos[o][d] += vel[o][d];
                reflect(&mut pos[o][d], &mut vel[o][d], lo, hi);
            }
        }
        positions.push(pos.clone());
        velocities.push(vel.clone());
    }
    Ok((positions, velocities))
}

/// Anti-aliased disks drawn in object order over a black background.
/// Centres are in pixel units where pixel `i` has its centre at `i`.
pub fn render_frame(config: &SceneConfig, centres: &[[f64; 2]]) -> Vec<u8> {
    let n = config.image_size;
    let r = config.object_radius;
    let mut img = vec![0f32; n * n * 3];
    for (o, c) in centres.iter().enumerate() {
        let color = config.palette[o];
        let y0 = ((c[1] - r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((c[1] + r + 1.0).ceil().min(n as f64 - 1.0)) as usize;
        let x0 = ((c[0] - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((c[0] + r + 1.0).ceil().min(n as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (x as f64 - c[0]).hypot(y as f64 - c[1]);
                let a = (r - d + 0.5).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    let p = &mut img[(y * n + x) * 3..(y * n + x) * 3 + 3];
                    for ch in 0..3 {
                        p[ch] = p[ch] * (1.0 - a) + color[ch] as f32 * a;
                    }
                }
            }
        }
    }
    img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

fn to_normalized(p: f64, n: usize) -> f64 {
    (p + 0.5) * 2.0 / n as f64 - 1.0
}

fn normalized_coords(pixels: &[Vec<[f64; 2]>], n: usize) -> Vec<Vec<[f64; 2]>> {
    // Rounded through f32 so the stored arrays round-trip exactly.
    pixels.iter().map(|s| s.iter().map(|p| [to_normalized(p[0], n) as f32 as f64, to_normalized(p[1], n) as f32 as f64]).collect()).collect()
}

fn make_dataset(config: &SceneConfig, splits: SplitSizes, action_size: usize, sequences: Vec<SequenceRecord>) -> Dataset {
    Dataset {
        frames: config.sequence_length,
        height: config.image_size,
        width: config.image_size,
        channels: 3,
        num_objects: config.num_objects,
        action_size,
        sequences,
        train: (0..splits.train).collect(),
        test: (splits.train..splits.train + splits.test).collect(),
        root_seed: config.seed,
        scene: Some(config.clone()),
    }
}

/// Dots moving at constant speed, reflecting off the borders and turning
/// with `turn_probability` per frame. Sequences `0..train` form the training
/// split, the rest the test split.
pub fn generate_bouncing_dots(config: &SceneConfig, splits: SplitSizes) -> Result<Dataset> {
    config.validate()?;
    let total = splits.train + splits.test;
    let mut sequences = Vec::with_capacity(total);
    for i in 0..total {
        let seed = sequence_seed(config.seed, i as u64);
        let (pixels, _) = simulate_dots(config, seed, None)?;
        let frames = pixels.iter().flat_map(|c| render_frame(config, c)).collect();
        sequences.push(SequenceRecord { seed, frames, trajectory: TrajectoryRecord { coords: normalized_coords(&pixels, config.image_size), actions: None, label: None, rewards: None } });
    }
    Ok(make_dataset(config, splits, 0, sequences))
}

/// Like [`generate_bouncing_dots`] but object 0 receives a random 2-D
/// acceleration every frame; rewards are the negative distance of object 0
/// to the goal.
pub fn generate_action_conditioned(config: &SceneConfig, settings: &ActionSettings, splits: SplitSizes) -> Result<Dataset> {
    config.validate()?;
    if !(settings.max_action >= 0.0) {
        return Err(Error::Config("max_action must be non-negative".into()));
    }
    let total = splits.train + splits.test;
    let mut sequences = Vec::with_capacity(total);
    for i in 0..total {
        let seed = sequence_seed(config.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5_A5A5_A5A5);
        let m = settings.max_action;
        let actions: Vec<[f64; 2]> = (0..config.sequence_length)
            .map(|t| if t == 0 || m == 0.0 { [0.0, 0.0] } else { [(rng.gen_range(-m..=m) as f32) as f64, (rng.gen_range(-m..=m) as f32) as f64] })
            .collect();
        let (pixels, _) = simulate_dots(config, seed, Some(&actions))?;
        let frames = pixels.iter().flat_map(|c| render_frame(config, c)).collect();
        let coords = normalized_coords(&pixels, config.image_size);
        let rewards = coords.iter().map(|s| -((s[0][0] - settings.goal[0]).hypot(s[0][1] - settings.goal[1])) as f32 as f64).collect();
        sequences.push(SequenceRecord {
            seed,
            frames,
            trajectory: TrajectoryRecord { coords, actions: Some(actions.iter().map(|a| a.to_vec()).collect()), label: None, rewards: Some(rewards) },
        });
    }
    Ok(make_dataset(config, splits, 2, sequences))
}
