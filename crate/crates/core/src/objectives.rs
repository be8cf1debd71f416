//! Loss terms and their weighted composition.
//!
//! Batch reduction convention: means over sequences, sums over time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{GaussianBelief, RnnState, Vrnn};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::vision::VideoSequence;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image: f64,
    pub separation: f64,
    pub sparsity: f64,
    pub kl: f64,
    pub negloglik_observed: f64,
    pub negloglik_future: f64,
    /// Weight applied to `kl` in the total (`β` times the annealing factor).
    pub kl_scale: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Named fields in a fixed order, used for logging and non-finite checks.
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("image", self.image),
            ("separation", self.separation),
            ("sparsity", self.sparsity),
            ("kl", self.kl),
            ("negloglik_observed", self.negloglik_observed),
            ("negloglik_future", self.negloglik_future),
            ("kl_scale", self.kl_scale),
            ("total", self.total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// `image + λ_sep·separation + λ_sparse·sparsity + nll_obs + kl_scale·kl + nll_future`.
pub fn total_loss(parts: &LossBreakdown, lambda_sep: f64, lambda_sparse: f64) -> f64 {
    parts.image + lambda_sep * parts.separation + lambda_sparse * parts.sparsity + parts.negloglik_observed + parts.kl_scale * parts.kl + parts.negloglik_future
}

/// Sum of squared pixel differences over all frames.
pub fn image_loss(truth: &VideoSequence, recon: &VideoSequence) -> Result<f64> {
    if (truth.frames, truth.height, truth.width, truth.channels) != (recon.frames, recon.height, recon.width, recon.channels) {
        return Err(Error::Shape("image_loss: sequences differ in shape".into()));
    }
    Ok(truth.data.iter().zip(&recon.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum())
}

/// Mean of [`image_loss`] over a batch.
pub fn image_loss_batch(truth: &[VideoSequence], recon: &[VideoSequence]) -> Result<f64> {
    if truth.len() != recon.len() || truth.is_empty() {
        return Err(Error::Shape("image_loss: batch sizes differ or are empty".into()));
    }
    let mut total = 0.0;
    for (a, b) in truth.iter().zip(recon) {
        total += image_loss(a, b)?;
    }
    Ok(total / truth.len() as f64)
}

/// Batch-mean squared error on flat buffers holding `batch` sequences, with
/// its gradient with respect to `recon`.
pub fn image_loss_grad<T: Real>(truth: &[T], recon: &[T], batch: usize) -> (f64, Vec<T>) {
    assert_eq!(truth.len(), recon.len());
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    let grad = truth
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = b.to_f64().unwrap() - a.to_f64().unwrap();
            loss += d * d;
            T::c(2.0 * d * inv)
        })
        .collect();
    (loss * inv, grad)
}

/// Overlap penalty between mean-centred trajectories (`T x K` of `[x, y]`).
pub fn separation_loss(trajectories: &[Vec<[f64; 2]>], sigma_sep: f64) -> f64 {
    separation_loss_grad(trajectories, sigma_sep).0
}

/// [`separation_loss`] and its gradient with respect to every coordinate.
pub fn separation_loss_grad(trajectories: &[Vec<[f64; 2]>], sigma_sep: f64) -> (f64, Vec<Vec<[f64; 2]>>) {
    let t_len = trajectories.len();
    if t_len == 0 {
        return (0.0, Vec::new());
    }
    let k = trajectories[0].len();
    let mut mean = vec![[0.0; 2]; k];
    for step in trajectories {
        for (m, p) in mean.iter_mut().zip(step) {
            m[0] += p[0] / t_len as f64;
            m[1] += p[1] / t_len as f64;
        }
    }
    let centred: Vec<Vec<[f64; 2]>> = trajectories.iter().map(|s| s.iter().zip(&mean).map(|(p, m)| [p[0] - m[0], p[1] - m[1]]).collect()).collect();
    let inv_two_var = 1.0 / (2.0 * sigma_sep * sigma_sep);
    let mut loss = 0.0;
    let mut grad = vec![vec![[0.0; 2]; k]; t_len];
    for a in 0..k {
        loss += 1.0;
        for b in (a + 1)..k {
            let d: f64 = centred.iter().map(|s| (s[a][0] - s[b][0]).powi(2) + (s[a][1] - s[b][1]).powi(2)).sum::<f64>() / t_len as f64;
            let e = (-d * inv_two_var).exp();
            loss += 2.0 * e;
            // Both orderings of the pair contribute; centring is a projection
            // whose adjoint leaves these already-centred gradients unchanged.
            let coef = -2.0 * e * inv_two_var * 2.0 / t_len as f64;
            for (t, s) in centred.iter().enumerate() {
                for c in 0..2 {
                    let g = coef * (s[a][c] - s[b][c]);
                    grad[t][a][c] += g;
                    grad[t][b][c] -= g;
                }
            }
        }
    }
    (loss, grad)
}

/// `Σ_k |μ_k|`.
pub fn sparsity_loss(scales: &[f64]) -> f64 {
    scales.iter().map(|m| m.abs()).sum()
}

/// Subgradient of [`sparsity_loss`], zero at zero.
pub fn sparsity_grad(scales: &[f64]) -> Vec<f64> {
    scales.iter().map(|&m| if m > 0.0 { 1.0 } else if m < 0.0 { -1.0 } else { 0.0 }).collect()
}

/// One dimension of KL(q || p) and its partials
/// `(kl, ∂/∂m_q, ∂/∂s_q, ∂/∂m_p, ∂/∂s_p)`.
pub fn kl_diag_terms(mq: f64, sq: f64, mp: f64, sp: f64) -> (f64, f64, f64, f64, f64) {
    let diff = mq - mp;
    let vp = sp * sp;
    let kl = (sp / sq).ln() + (sq * sq + diff * diff) / (2.0 * vp) - 0.5;
    (kl, diff / vp, -1.0 / sq + sq / vp, -diff / vp, 1.0 / sp - (sq * sq + diff * diff) / (vp * sp))
}

/// Closed-form KL divergence between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(posterior: &GaussianBelief, prior: &GaussianBelief) -> Result<f64> {
    if posterior.mean.len() != prior.mean.len() || posterior.stddev.len() != prior.stddev.len() || posterior.mean.len() != posterior.stddev.len() {
        return Err(Error::Shape("kl_diag_gaussian: belief dimensions differ".into()));
    }
    if posterior.stddev.iter().chain(&prior.stddev).any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid("kl_diag_gaussian: stddev must be positive".into()));
    }
    Ok((0..posterior.mean.len()).map(|i| kl_diag_terms(posterior.mean[i], posterior.stddev[i], prior.mean[i], prior.stddev[i]).0).sum())
}

/// Negative log-density of `target` under `N(prediction, I)`.
pub fn gaussian_nll(target: &[f64], prediction: &[f64]) -> f64 {
    let sq: f64 = target.iter().zip(prediction).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * sq + 0.5 * target.len() as f64 * LN_2PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestOfMany {
    pub nll: f64,
    pub chosen_z: Vec<f64>,
    /// NLL of every drawn sample, in draw order.
    pub sample_nll: Vec<f64>,
}

/// Draw `num_samples` latents from `belief`, decode each against `h` and
/// keep the one whose decoding is most likely under the target.
pub fn best_of_many_nll(model: &Vrnn, target: &[f64], belief: &GaussianBelief, h: &RnnState, num_samples: usize, seed: u64) -> Result<BestOfMany> {
    if num_samples == 0 {
        return Err(Error::Invalid("best_of_many_nll: need at least one sample".into()));
    }
    belief.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Vec<f64>> = (0..num_samples)
        .map(|_| {
            belief.mean.iter().zip(&belief.stddev).map(|(m, s)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + s * e
            }).collect()
        })
        .collect();
    let decoded = model.decode_many(&zs, h)?;
    if decoded[0].len() != target.len() {
        return Err(Error::Shape("best_of_many_nll: target length differs from model keypoint size".into()));
    }
    let sample_nll: Vec<f64> = decoded.iter().map(|x| gaussian_nll(target, x)).collect();
    let (best, nll) = sample_nll.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    Ok(BestOfMany { nll, chosen_z: zs[best].clone(), sample_nll })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboComponents {
    /// Observed NLL plus the weighted KL.
    pub observed: f64,
    pub future: f64,
    /// The weighted KL part of `observed`.
    pub kl_contribution: f64,
}

/// Combine per-step terms: observed steps carry `anneal·β·KL`, future steps
/// are reconstruction only.
pub fn elbo_losses(observed_nll: &[f64], future_nll: &[f64], kl: &[f64], beta: f64, kl_anneal_scale: f64) -> Result<ElboComponents> {
    if beta < 0.0 || !(0.0..=1.0).contains(&kl_anneal_scale) {
        return Err(Error::Invalid("elbo_losses: need beta >= 0 and anneal in [0, 1]".into()));
    }
    if kl.len() != observed_nll.len() {
        return Err(Error::Shape("elbo_losses: one KL value per observed step".into()));
    }
    let kl_contribution = if kl_anneal_scale == 0.0 || beta == 0.0 { 0.0 } else { kl_anneal_scale * beta * kl.iter().sum::<f64>() };
    Ok(ElboComponents { observed: observed_nll.iter().sum::<f64>() + kl_contribution, future: future_nll.iter().sum(), kl_contribution })
}
