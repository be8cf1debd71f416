//! Linear-probe trajectory error with best-of-N sampling, a static
//! baseline, pixel metrics and sample diversity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ObservedFeed, RolloutRequest};
use crate::error::{Error, Result};
use crate::model::KeypointDynamicsModel;
use crate::synthdata::Dataset;

/// Ridge added to the normal equations for conditioning.
pub const PROBE_RIDGE: f64 = 1e-6;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Affine map from a keypoint vector to flattened object coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major `input_dim x output_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.output_dim..(i + 1) * self.output_dim];
            for (o, w) in y.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        y
    }
}

/// Least squares with an unregularized bias and a small ridge on the weights.
pub fn fit_probe(features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<ProbeModel> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Shape("fit_probe needs matching, non-empty feature and target rows".into()));
    }
    let d = features[0].len();
    let m = targets[0].len();
    if features.iter().any(|f| f.len() != d) || targets.iter().any(|t| t.len() != m) {
        return Err(Error::Shape("fit_probe rows differ in length".into()));
    }
    let x = DMatrix::from_fn(features.len(), d + 1, |r, c| if c < d { features[r][c] } else { 1.0 });
    let y = DMatrix::from_fn(targets.len(), m, |r, c| targets[r][c]);
    let mut gram = x.transpose() * &x;
    for i in 0..d {
        gram[(i, i)] += PROBE_RIDGE;
    }
    let rhs = x.transpose() * y;
    let sol = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).ok_or_else(|| Error::Invalid("probe normal equations are singular".into()))?,
    };
    let mut weights = Vec::with_capacity(d * m);
    for i in 0..d {
        for j in 0..m {
            weights.push(sol[(i, j)]);
        }
    }
    Ok(ProbeModel { input_dim: d, output_dim: m, weights, bias: (0..m).map(|j| sol[(d, j)]).collect() })
}

/// Mean Euclidean distance between flattened `[x0, y0, x1, y1, ...]` coordinates.
pub fn mean_point_error(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() / 2;
    (0..n).map(|o| (pred[2 * o] - truth[2 * o]).hypot(pred[2 * o + 1] - truth[2 * o + 1])).sum::<f64>() / n.max(1) as f64
}

fn point_errors(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    (0..truth.len() / 2).map(|o| (pred[2 * o] - truth[2 * o]).hypot(pred[2 * o + 1] - truth[2 * o + 1])).collect()
}

fn flat_coords(c: &[[f64; 2]]) -> Vec<f64> {
    c.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Best-sample selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOf {
    /// One sample per sequence, by mean error over all predicted coordinates.
    #[default]
    Sequence,
    /// One sample per object.
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOptions {
    pub observed_steps: usize,
    pub predict_steps: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub best_of: BestOf,
    pub feed: ObservedFeed,
}

/// Detected keypoint vectors and ground truth of one evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSequence {
    pub id: usize,
    pub keypoints: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    pub actions: Option<Vec<Vec<f64>>>,
}

/// Detect keypoints on frames `0..len` of the given sequences.
pub fn prepare_sequences(model: &KeypointDynamicsModel, data: &Dataset, ids: &[usize], len: usize) -> Result<Vec<EvalSequence>> {
    if len > data.frames {
        return Err(Error::Config(format!("evaluation needs {len} frames, sequences have {}", data.frames)));
    }
    ids.iter()
        .map(|&id| {
            let video = data.video(id)?.window(0, len);
            let keypoints = model.detect(&video)?.iter().map(|s| s.to_vector()).collect();
            let traj = &data.sequences[id].trajectory;
            Ok(EvalSequence {
                id,
                keypoints,
                truth: traj.coords[..len].iter().map(|c| flat_coords(c)).collect(),
                actions: traj.actions.as_ref().filter(|_| model.hyper.action_size > 0).map(|a| a[..len].to_vec()),
            })
        })
        .collect()
}

/// Fit a probe on every frame of the given sequences.
pub fn fit_probe_on(sequences: &[EvalSequence]) -> Result<ProbeModel> {
    let features: Vec<Vec<f64>> = sequences.iter().flat_map(|s| s.keypoints.iter().cloned()).collect();
    let targets: Vec<Vec<f64>> = sequences.iter().flat_map(|s| s.truth.iter().cloned()).collect();
    fit_probe(&features, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// Mean over sequences of the best sample's error, per step, normalized units.
    pub best: Vec<f64>,
    /// Same for sample 0 alone.
    pub first_sample: Vec<f64>,
    pub static_baseline: Vec<f64>,
    /// Per-sequence mean predicted-step error of the best sample.
    pub per_sequence_best: Vec<f64>,
    pub per_sequence_first: Vec<f64>,
    pub per_sequence_static: Vec<f64>,
    pub observed_steps: usize,
    pub num_samples: usize,
    pub aggregation: String,
}

impl TrajectoryReport {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn observed_mean(&self) -> f64 {
        Self::mean(&self.best[..self.observed_steps])
    }

    pub fn predicted_mean(&self, curve: &[f64]) -> f64 {
        Self::mean(&curve[self.observed_steps..])
    }
}

/// Pixel size of one normalized unit in a square frame of `image_size` pixels.
pub fn pixels_per_unit(image_size: usize) -> f64 {
    image_size as f64 / 2.0
}

fn add_curve(acc: &mut [f64], values: &[f64], scale: f64) {
    for (a, v) in acc.iter_mut().zip(values) {
        *a += v * scale;
    }
}

/// Static baseline: every predicted step repeats the last observed keypoints.
pub fn static_baseline_error(sequences: &[EvalSequence], probe: &ProbeModel, observed_steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if sequences.is_empty() || observed_steps == 0 {
        return Err(Error::Invalid("static baseline needs sequences and at least one observed step".into()));
    }
    let len = sequences[0].truth.len();
    let mut curve = vec![0.0; len];
    let mut per_seq = Vec::with_capacity(sequences.len());
    let scale = 1.0 / sequences.len() as f64;
    for s in sequences {
        let last = probe.predict(&s.keypoints[observed_steps - 1]);
        let errs: Vec<f64> = (0..len)
            .map(|t| {
                let p = if t < observed_steps { probe.predict(&s.keypoints[t]) } else { last.clone() };
                mean_point_error(&p, &s.truth[t])
            })
            .collect();
        per_seq.push(TrajectoryReport::mean(&errs[observed_steps..]));
        add_curve(&mut curve, &errs, scale);
    }
    Ok((curve, per_seq))
}

/// Roll out samples for every sequence, map them through the probe and
/// keep the best sample. Observed steps use the detected keypoints.
pub fn trajectory_error(model: &KeypointDynamicsModel, probe: &ProbeModel, sequences: &[EvalSequence], opts: &TrajectoryOptions) -> Result<TrajectoryReport> {
    let (t_obs, dt) = (opts.observed_steps, opts.predict_steps);
    if sequences.is_empty() || t_obs == 0 || opts.num_samples == 0 {
        return Err(Error::Invalid("trajectory error needs sequences, observed steps and samples".into()));
    }
    let len = t_obs + dt;
    if sequences.iter().any(|s| s.keypoints.len() < len) {
        return Err(Error::Config(format!("sequences shorter than {len} steps")));
    }
    let scale = 1.0 / sequences.len() as f64;
    let mut best = vec![0.0; len];
    let mut first = vec![0.0; len];
    let (mut per_best, mut per_first) = (Vec::new(), Vec::new());
    for s in sequences {
        let observed: Vec<f64> = (0..t_obs).map(|t| mean_point_error(&probe.predict(&s.keypoints[t]), &s.truth[t])).collect();
        add_curve(&mut best[..t_obs], &observed, scale);
        add_curve(&mut first[..t_obs], &observed, scale);
        if dt == 0 {
            continue;
        }
        let mut req = RolloutRequest::new(&s.keypoints[..t_obs], dt, opts.num_samples, opts.seed ^ (s.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        req.feed = opts.feed;
        req.actions = s.actions.as_deref();
        let roll = model.dynamics.rollout(&req)?;
        // errors[sample][step][object]
        let errors: Vec<Vec<Vec<f64>>> = roll
            .trajectories
            .iter()
            .map(|traj| (t_obs..len).map(|t| point_errors(&probe.predict(&traj[t]), &s.truth[t])).collect())
            .collect();
        let objects = errors[0][0].len();
        let sample_mean = |i: usize| errors[i].iter().flatten().sum::<f64>() / (dt * objects) as f64;
        let curve_of = |pick: &dyn Fn(usize) -> usize| -> Vec<f64> {
            (0..dt).map(|t| (0..objects).map(|o| errors[pick(o)][t][o]).sum::<f64>() / objects as f64).collect()
        };
        let best_curve = match opts.best_of {
            BestOf::Sequence => {
                let i = (0..opts.num_samples).min_by(|&a, &b| sample_mean(a).total_cmp(&sample_mean(b))).unwrap_or(0);
                curve_of(&|_| i)
            }
            BestOf::Object => {
                let picks: Vec<usize> = (0..objects)
                    .map(|o| {
                        let cost = |i: usize| errors[i].iter().map(|e| e[o]).sum::<f64>();
                        (0..opts.num_samples).min_by(|&a, &b| cost(a).total_cmp(&cost(b))).unwrap_or(0)
                    })
                    .collect();
                curve_of(&|o| picks[o])
            }
        };
        let first_curve = curve_of(&|_| 0);
        per_best.push(TrajectoryReport::mean(&best_curve));
        per_first.push(TrajectoryReport::mean(&first_curve));
        add_curve(&mut best[t_obs..], &best_curve, scale);
        add_curve(&mut first[t_obs..], &first_curve, scale);
    }
    let (static_baseline, per_static) = static_baseline_error(sequences, probe, t_obs)?;
    Ok(TrajectoryReport {
        best,
        first_sample: first,
        static_baseline: static_baseline[..len].to_vec(),
        per_sequence_best: per_best,
        per_sequence_first: per_first,
        per_sequence_static: per_static,
        observed_steps: t_obs,
        num_samples: opts.num_samples,
        aggregation: "mean".into(),
    })
}

/// PSNR for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let w: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn blur_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = win.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| win[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over channels of two interleaved `H x W x C` images in `[0, 1]`
/// (11-tap Gaussian window, σ = 1.5, valid region only).
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize) -> f64 {
    let win = gaussian_window();
    if h < win.len() || w < win.len() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| a[i * c + ch] as f64).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mx, oh, ow) = blur_valid(&x, h, w, &win);
        let (my, _, _) = blur_valid(&y, h, w, &win);
        let (sxx, _, _) = blur_valid(&prod(&x, &x), h, w, &win);
        let (syy, _, _) = blur_valid(&prod(&y, &y), h, w, &win);
        let (sxy, _, _) = blur_valid(&prod(&x, &y), h, w, &win);
        let mut s = 0.0;
        for i in 0..oh * ow {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            s += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / (oh * ow) as f64;
    }
    total / c as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelScores {
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-frame PSNR and SSIM between two videos of equal shape.
pub fn pixel_metrics(truth: &crate::vision::VideoSequence, pred: &crate::vision::VideoSequence) -> Result<Vec<PixelScores>> {
    if (truth.frames, truth.height, truth.width, truth.channels) != (pred.frames, pred.height, pred.width, pred.channels) {
        return Err(Error::Shape("pixel_metrics: videos differ in shape".into()));
    }
    Ok((0..truth.frames)
        .map(|t| PixelScores { psnr: psnr(truth.frame(t), pred.frame(t)), ssim: ssim(truth.frame(t), pred.frame(t), truth.height, truth.width, truth.channels) })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub closest: f64,
    pub furthest: f64,
    /// `furthest - closest`.
    pub spread: f64,
}

/// Errors of the closest and furthest sample trajectories. `samples` is
/// `S x steps x coords`, `truth` is `steps x coords`.
pub fn diversity_stats(samples: &[Vec<Vec<f64>>], truth: &[Vec<f64>]) -> Result<DiversityStats> {
    if samples.is_empty() || truth.is_empty() {
        return Err(Error::Invalid("diversity_stats needs samples and ground truth".into()));
    }
    let errs: Vec<f64> = samples
        .iter()
        .map(|s| {
            if s.len() != truth.len() {
                return Err(Error::Shape("sample length differs from ground truth".into()));
            }
            Ok(s.iter().zip(truth).map(|(p, t)| mean_point_error(p, t)).sum::<f64>() / truth.len() as f64)
        })
        .collect::<Result<_>>()?;
    let closest = errs.iter().copied().fold(f64::INFINITY, f64::min);
    let furthest = errs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DiversityStats { closest, furthest, spread: furthest - closest })
}
