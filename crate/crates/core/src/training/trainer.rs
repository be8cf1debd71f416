use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kl_anneal_at, lr_at, scheduled_sampling_prob_at, Checkpoint, HyperParams, Phase};
use crate::dynamics::{draw_noise, UnrollBatch};
use crate::error::{Error, Result};
use crate::model::KeypointDynamicsModel;
use crate::nn::{Adam, Mat, Parameterized};
use crate::objectives::{image_loss_grad, separation_loss_grad, total_loss, LossBreakdown};
use crate::synthdata::{sequence_seed, Dataset};

pub const METRICS_HEADER: &str =
    "step,image,separation,sparsity,kl,negloglik_observed,negloglik_future,kl_scale,total,lr,kl_anneal,ss_observed,ss_predicted";

/// Running sums of the loss terms over the current logging interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub sums: Vec<f64>,
    pub count: u64,
}

impl MetricsAccumulator {
    pub fn add(&mut self, loss: &LossBreakdown) {
        let fields = loss.fields();
        if self.sums.len() != fields.len() {
            self.sums = vec![0.0; fields.len()];
        }
        for (s, (_, v)) in self.sums.iter_mut().zip(fields) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn means(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.count.max(1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Number of completed steps after this update.
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub struct Trainer<'a> {
    pub model: KeypointDynamicsModel,
    pub vision_opt: Adam<f32>,
    pub dynamics_opt: Adam<f64>,
    /// Completed steps.
    pub step: u64,
    pub metrics: MetricsAccumulator,
    dataset: &'a Dataset,
}

fn check_dataset(hp: &HyperParams, data: &Dataset) -> Result<()> {
    if data.height != hp.image_size || data.width != hp.image_size || data.channels != hp.channels {
        return Err(Error::Config(format!(
            "dataset frames are {}x{}x{}, config expects {}x{}x{}",
            data.height, data.width, data.channels, hp.image_size, hp.image_size, hp.channels
        )));
    }
    if data.frames < hp.window_len() {
        return Err(Error::Config(format!("sequences have {} frames, training windows need {}", data.frames, hp.window_len())));
    }
    if data.train.is_empty() {
        return Err(Error::Config("dataset has no training sequences".into()));
    }
    if hp.action_size > 0 && data.action_size != hp.action_size {
        return Err(Error::Config(format!("config expects actions of size {}, dataset has {}", hp.action_size, data.action_size)));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(hyper: HyperParams, dataset: &'a Dataset) -> Result<Self> {
        check_dataset(&hyper, dataset)?;
        let model = KeypointDynamicsModel::new(hyper)?;
        let adam = model.hyper.adam_config();
        Ok(Self {
            vision_opt: Adam::new(adam, &model.vision),
            dynamics_opt: Adam::new(adam, &model.dynamics),
            model,
            step: 0,
            metrics: MetricsAccumulator::default(),
            dataset,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        check_dataset(&ckpt.model.hyper, dataset)?;
        Ok(Self { model: ckpt.model, vision_opt: ckpt.vision_opt, dynamics_opt: ckpt.dynamics_opt, step: ckpt.step, metrics: ckpt.pending_metrics, dataset })
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.model.hyper
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.model.clone(),
            vision_opt: self.vision_opt.clone(),
            dynamics_opt: self.dynamics_opt.clone(),
            pending_metrics: self.metrics.clone(),
        }
    }

    /// One optimizer update. All randomness comes from `(seed, step)`.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let hp = self.model.hyper.clone();
        let step = self.step;
        let loss = self.compute_gradients(true)?;
        if let Some(max_norm) = hp.grad_clip_norm {
            self.clip_gradients(max_norm);
        }
        let lr = lr_at(&hp, step);
        self.vision_opt.step(&mut self.model.vision, lr);
        self.dynamics_opt.step(&mut self.model.dynamics, lr);
        if !self.model.vision.all_finite() || !self.model.dynamics.all_finite() {
            return Err(Error::NonFinite(format!("parameters after update at step {}", step + 1)));
        }
        self.step += 1;
        self.metrics.add(&loss);
        Ok(StepOutcome { step: self.step, loss, lr })
    }

    /// Loss and parameter gradients of the batch for the current step,
    /// without updating anything. With `include_dynamics = false` the
    /// dynamics terms are left out of the backward pass (the reported loss
    /// still contains them).
    pub fn compute_gradients(&mut self, include_dynamics: bool) -> Result<LossBreakdown> {
        self.model.vision.zero_grad();
        self.model.dynamics.zero_grad();
        let hp = self.model.hyper.clone();
        let step = self.step;
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(hp.seed, step));
        let (b, len, k) = (hp.batch_size, hp.window_len(), hp.num_keypoints);
        let data = self.dataset;

        let picks: Vec<(usize, usize)> = (0..b)
            .map(|_| {
                let id = data.train[rng.gen_range(0..data.train.len())];
                (id, rng.gen_range(0..=data.frames - len))
            })
            .collect();
        let windows: Vec<Vec<f32>> = picks.iter().map(|&(id, s)| data.window(id, s, len)).collect();
        let fl = hp.image_size * hp.image_size * hp.channels;
        let frames: Vec<&[f32]> = windows.iter().flat_map(|w| w.chunks(fl)).collect();
        let input = self.model.vision.frames_to_tensor(&frames)?;

        // Keypoint autoencoder.
        let trace = self.model.vision.forward_train(&input, b, len)?;
        let (image, d_recon) = image_loss_grad(&input.data, &trace.reconstruction.data, b);
        let kp = |n: usize, kk: usize| {
            let (x, y, m) = trace.keypoints[n * k + kk];
            (x as f64, y as f64, m as f64)
        };
        let mut d_kp = vec![(0f32, 0f32, 0f32); b * len * k];
        let mut separation = 0.0;
        let mut sparsity = 0.0;
        for s in 0..b {
            let traj: Vec<Vec<[f64; 2]>> = (0..len).map(|t| (0..k).map(|kk| { let p = kp(s * len + t, kk); [p.0, p.1] }).collect()).collect();
            let (loss, grad) = separation_loss_grad(&traj, hp.sigma_sep);
            separation += loss / b as f64;
            for t in 0..len {
                for kk in 0..k {
                    let n = s * len + t;
                    let mu = kp(n, kk).2;
                    sparsity += mu.abs() / (b * len) as f64;
                    let g = &mut d_kp[n * k + kk];
                    g.0 += (hp.lambda_sep * grad[t][kk][0] / b as f64) as f32;
                    g.1 += (hp.lambda_sep * grad[t][kk][1] / b as f64) as f32;
                    g.2 += (hp.lambda_sparse * mu.signum() * if mu == 0.0 { 0.0 } else { 1.0 } / (b * len) as f64) as f32;
                }
            }
        }

        // Dynamics on detached keypoints.
        let per_seq = hp.bom_per_sequence;
        let (rep, samples) = if per_seq { (hp.bom_samples, 1) } else { (1, hp.bom_samples) };
        let rows = b * rep;
        let targets: Vec<Mat> = (0..len)
            .map(|t| {
                let mut m = Mat::zeros(rows, 3 * k);
                for r in 0..rows {
                    let n = (r / rep) * len + t;
                    for kk in 0..k {
                        let p = kp(n, kk);
                        m.row_mut(r)[3 * kk..3 * kk + 3].copy_from_slice(&[p.0, p.1, p.2]);
                    }
                }
                m
            })
            .collect();
        let actions: Option<Vec<Mat>> = (hp.action_size > 0).then(|| {
            (0..len)
                .map(|t| {
                    let mut m = Mat::zeros(rows, hp.action_size);
                    for r in 0..rows {
                        let (id, s) = picks[r / rep];
                        let a = &data.sequences[id].trajectory.actions.as_ref().expect("checked action size")[s + t];
                        m.row_mut(r).copy_from_slice(a);
                    }
                    m
                })
                .collect()
        });
        let noise = draw_noise(&mut rng, len, rows * samples, hp.latent_size);
        let p_obs = scheduled_sampling_prob_at(&hp, step, Phase::Observed);
        let p_pred = scheduled_sampling_prob_at(&hp, step, Phase::Predicted);
        let feed: Vec<Vec<bool>> = (0..len)
            .map(|t| {
                let p = if t < hp.observed_steps { p_obs } else { p_pred };
                (0..rows).map(|_| rng.gen::<f64>() < p).collect()
            })
            .collect();
        let anneal = kl_anneal_at(&hp, step);
        let kl_scale = hp.beta * anneal;
        let batch = UnrollBatch {
            targets: &targets,
            actions: actions.as_deref(),
            observed_steps: hp.observed_steps,
            samples,
            noise: &noise,
            feed_decoded: &feed,
            kl_weight: kl_scale,
        };
        let result = self.model.dynamics.unroll(&batch)?;
        let mut weights = vec![0.0; rows];
        for s in 0..b {
            let best = (0..rep)
                .min_by(|&i, &j| {
                    let cost = |r: usize| (0..len).map(|t| result.nll[t][r]).sum::<f64>();
                    cost(s * rep + i).total_cmp(&cost(s * rep + j))
                })
                .unwrap_or(0);
            weights[s * rep + best] = 1.0 / b as f64;
        }
        let (mut nll_obs, mut nll_fut, mut kl) = (0.0, 0.0, 0.0);
        for t in 0..len {
            for (r, w) in weights.iter().enumerate() {
                if t < hp.observed_steps {
                    nll_obs += w * result.nll[t][r];
                    kl += w * result.kl[t][r];
                } else {
                    nll_fut += w * result.nll[t][r];
                }
            }
        }
        let mut loss = LossBreakdown { image, separation, sparsity, kl, negloglik_observed: nll_obs, negloglik_future: nll_fut, kl_scale, total: 0.0 };
        loss.total = total_loss(&loss, hp.lambda_sep, hp.lambda_sparse);
        if let Some(term) = loss.first_non_finite() {
            return Err(Error::NonFinite(format!("loss term {term} at step {}", step + 1)));
        }

        // Gradients.
        let d_recon_t = crate::nn::Tensor4::from_vec(trace.reconstruction.c, trace.reconstruction.n, trace.reconstruction.h, trace.reconstruction.w, d_recon);
        self.model.vision.backward_train(&trace, &d_recon_t, &d_kp);
        if include_dynamics {
            self.model.dynamics.unroll_backward(&batch, &result, &weights);
        }
        Ok(loss)
    }

    fn clip_gradients(&mut self, max_norm: f64) {
        let mut sq = 0.0;
        self.model.vision.visit(&mut |p| sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
        self.model.dynamics.visit(&mut |p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            self.model.vision.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s as f32));
            self.model.dynamics.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
        }
    }

    /// CSV row for the interval ending at the current step.
    fn metrics_row(&self) -> String {
        let hp = &self.model.hyper;
        let last = self.step.saturating_sub(1);
        let mut cols: Vec<String> = vec![self.step.to_string()];
        cols.extend(self.metrics.means().iter().map(|v| v.to_string()));
        for v in [lr_at(hp, last), kl_anneal_at(hp, last), scheduled_sampling_prob_at(hp, last, Phase::Observed), scheduled_sampling_prob_at(hp, last, Phase::Predicted)] {
            cols.push(v.to_string());
        }
        cols.join(",")
    }

    /// Train until `total_steps`, writing `metrics.csv` and checkpoints into
    /// `out_dir`. Returns the path of the final checkpoint.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, mut on_log: impl FnMut(&str)) -> Result<PathBuf> {
        let out = out_dir.as_ref();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let metrics_path = out.join("metrics.csv");
        // On resume keep only rows up to the restored step.
        let mut kept = vec![METRICS_HEADER.to_string()];
        if self.step > 0 {
            if let Ok(text) = fs::read_to_string(&metrics_path) {
                kept.extend(text.lines().skip(1).filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= self.step)).map(str::to_string));
            }
        }
        fs::write(&metrics_path, kept.join("\n") + "\n").map_err(|e| Error::io(&metrics_path, e))?;
        let mut file = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let hp = self.model.hyper.clone();
        while self.step < hp.total_steps {
            self.train_step()?;
            if self.step.is_multiple_of(hp.log_interval) {
                let row = self.metrics_row();
                writeln!(file, "{row}").map_err(|e| Error::io(&metrics_path, e))?;
                on_log(&row);
                self.metrics = MetricsAccumulator::default();
            }
            if hp.checkpoint_interval > 0 && self.step.is_multiple_of(hp.checkpoint_interval) && self.step < hp.total_steps {
                self.checkpoint().save(out.join(format!("checkpoint_{:08}.ckpt", self.step)))?;
            }
        }
        let last = out.join("final.ckpt");
        self.checkpoint().save(&last)?;
        Ok(last)
    }
}
