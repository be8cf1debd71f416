//! Variational recurrent dynamics over flattened keypoint vectors.
//!
//! At every step a prior belief over the latent `z` is computed from the
//! recurrent state; on observed steps a posterior additionally sees the
//! detected keypoints. A sampled `z` is decoded into a keypoint vector and
//! the recurrent state is advanced with `[x, z, a]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Gru, GruCache, Mat, Param, Parameterized};
use crate::objectives::{gaussian_nll, kl_diag_terms};
use crate::real::{sigmoid, softplus};

/// Floor added to every predicted standard deviation.
pub const STDDEV_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub num_keypoints: usize,
    pub latent_size: usize,
    pub prior_net_size: usize,
    pub posterior_net_size: usize,
    pub decoder_net_size: usize,
    pub rnn_units: usize,
    /// Zero disables action conditioning.
    pub action_size: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            num_keypoints: 6,
            latent_size: 16,
            prior_net_size: 16,
            posterior_net_size: 128,
            decoder_net_size: 128,
            rnn_units: 128,
            action_size: 0,
        }
    }
}

impl DynamicsConfig {
    pub fn keypoint_dim(&self) -> usize {
        3 * self.num_keypoints
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.num_keypoints, self.latent_size, self.prior_net_size, self.posterior_net_size, self.decoder_net_size, self.rnn_units];
        if sizes.contains(&0) {
            return Err(Error::Config("dynamics sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl GaussianBelief {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.stddev.len() {
            return Err(Error::Shape("belief mean and stddev lengths differ".into()));
        }
        if self.stddev.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid("belief stddev must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Recurrent state `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnState {
    pub hidden: Vec<f64>,
}

impl RnnState {
    pub fn zeros(units: usize) -> Self {
        Self { hidden: vec![0.0; units] }
    }
}

/// Where the recurrence takes its keypoint input on observed steps during a
/// rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservedFeed {
    /// The decoded keypoints (inference behaviour).
    #[default]
    Decoded,
    /// The detected keypoints (teacher forcing).
    Detected,
}

#[derive(Debug, Clone)]
pub struct RolloutRequest<'a> {
    /// Detected keypoint vectors of the observed steps.
    pub observed: &'a [Vec<f64>],
    pub predict_steps: usize,
    pub num_samples: usize,
    /// One action vector per step (`observed.len() + predict_steps`), where
    /// entry `t` is the action that produced frame `t`.
    pub actions: Option<&'a [Vec<f64>]>,
    pub seed: u64,
    /// Multiplier on every sampled standard deviation; 0 gives mean rollouts.
    pub noise_scale: f64,
    pub feed: ObservedFeed,
}

impl<'a> RolloutRequest<'a> {
    pub fn new(observed: &'a [Vec<f64>], predict_steps: usize, num_samples: usize, seed: u64) -> Self {
        Self { observed, predict_steps, num_samples, actions: None, seed, noise_scale: 1.0, feed: ObservedFeed::Decoded }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `samples x steps` decoded keypoint vectors.
    pub trajectories: Vec<Vec<Vec<f64>>>,
    /// Belief the latent was drawn from, `samples x steps`.
    pub beliefs: Vec<Vec<GaussianBelief>>,
}

/// Inputs of a batched training unroll over `B` sequences.
#[derive(Debug, Clone)]
pub struct UnrollBatch<'a> {
    /// Detected keypoints per step, each `B x 3K`.
    pub targets: &'a [Mat],
    /// Actions per step, each `B x A`.
    pub actions: Option<&'a [Mat]>,
    pub observed_steps: usize,
    /// Latent samples drawn per step for the best-of-many selection.
    pub samples: usize,
    /// Standard normal noise per step, `(B * samples) x Z`, row `b * samples + i`.
    pub noise: &'a [Mat],
    /// Per step and sequence: feed the decoded keypoints (instead of the
    /// detected ones) into the recurrence.
    pub feed_decoded: &'a [Vec<bool>],
    /// `β` times the annealing factor.
    pub kl_weight: f64,
}

#[derive(Debug, Clone)]
struct BeliefCache {
    input: Mat,
    hidden_pre: Mat,
    out: Mat,
}

#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Mat,
    prior: BeliefCache,
    prior_mean: Mat,
    prior_std: Mat,
    posterior: Option<(Mat, Mat, BeliefCache)>,
    eps_best: Mat,
    z_best: Mat,
    dec_hidden_pre: Mat,
    dec_out_pre: Mat,
    xhat: Mat,
    gru: GruCache,
}

/// Per-step, per-sequence losses of an unroll plus the saved activations.
#[derive(Debug, Clone)]
pub struct UnrollResult {
    /// Best-sample negative log-likelihood, `steps x B`.
    pub nll: Vec<Vec<f64>>,
    /// KL(posterior || prior), `steps x B`; zero on predicted steps.
    pub kl: Vec<Vec<f64>>,
    /// Index of the chosen sample, `steps x B`.
    pub chosen: Vec<Vec<usize>>,
    /// Decoded keypoints of the chosen sample, `steps x (B x 3K)`.
    pub decoded: Vec<Mat>,
    steps: Vec<StepCache>,
}

impl UnrollResult {
    /// Weighted objective `Σ_b w_b (Σ_t nll + kl_weight Σ_t kl)`.
    pub fn objective(&self, kl_weight: f64, row_weights: &[f64]) -> f64 {
        let mut total = 0.0;
        for t in 0..self.nll.len() {
            for (b, w) in row_weights.iter().enumerate() {
                total += w * (self.nll[t][b] + kl_weight * self.kl[t][b]);
            }
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct Vrnn {
    pub config: DynamicsConfig,
    pub prior_hidden: Dense,
    pub prior_out: Dense,
    pub posterior_hidden: Dense,
    pub posterior_out: Dense,
    /// Input rows are `[z | h]`.
    pub decoder_hidden: Dense,
    pub decoder_out: Dense,
    /// Input is `[x | z | a]`.
    pub rnn: Gru,
}

fn relu_inplace(m: &mut Mat) {
    m.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_backward(pre: &Mat, d: &mut Mat) {
    d.data.iter_mut().zip(&pre.data).for_each(|(g, &p)| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn split_belief(out: &Mat, z: usize) -> (Mat, Mat) {
    let mean = out.cols_slice(0, z);
    let mut std = out.cols_slice(z, z);
    std.data.iter_mut().for_each(|v| *v = softplus(*v) + STDDEV_FLOOR);
    (mean, std)
}

/// Squash decoder outputs: `tanh` on x/y, softplus on μ.
fn squash(pre: &Mat) -> Mat {
    let mut out = pre.clone();
    for r in 0..out.rows {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = if j % 3 == 2 { softplus(*v) } else { v.tanh() };
        }
    }
    out
}

impl Vrnn {
    pub fn new<R: rand::Rng + ?Sized>(config: DynamicsConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let kd = config.keypoint_dim();
        let (z, u) = (config.latent_size, config.rnn_units);
        Ok(Self {
            prior_hidden: Dense::new("prior.hidden", u, config.prior_net_size, rng),
            prior_out: Dense::new("prior.out", config.prior_net_size, 2 * z, rng),
            posterior_hidden: Dense::new("posterior.hidden", kd + u, config.posterior_net_size, rng),
            posterior_out: Dense::new("posterior.out", config.posterior_net_size, 2 * z, rng),
            decoder_hidden: Dense::new("decoder.hidden", z + u, config.decoder_net_size, rng),
            decoder_out: Dense::new("decoder.out", config.decoder_net_size, kd, rng),
            rnn: Gru::new("rnn", kd + z + config.action_size, u, rng),
            config,
        })
    }

    fn belief_forward(hidden: &Dense, out: &Dense, input: Mat, z: usize) -> (Mat, Mat, BeliefCache) {
        let hidden_pre = hidden.forward(&input);
        let mut act = hidden_pre.clone();
        relu_inplace(&mut act);
        let o = out.forward(&act);
        let (mean, std) = split_belief(&o, z);
        (mean, std, BeliefCache { input, hidden_pre, out: o })
    }

    fn belief_backward(hidden: &mut Dense, out: &mut Dense, cache: &BeliefCache, d_mean: &Mat, d_std: &Mat) -> Mat {
        let z = d_mean.cols;
        let mut d_out = Mat::zeros(cache.out.rows, 2 * z);
        for r in 0..d_out.rows {
            let raw = &cache.out.row(r)[z..];
            let row = d_out.row_mut(r);
            row[..z].copy_from_slice(d_mean.row(r));
            for j in 0..z {
                row[z + j] = d_std.row(r)[j] * sigmoid(raw[j]);
            }
        }
        let mut act = cache.hidden_pre.clone();
        relu_inplace(&mut act);
        let mut d_act = out.backward(&act, &d_out);
        relu_backward(&cache.hidden_pre, &mut d_act);
        hidden.backward(&cache.input, &d_act)
    }

    fn prior_batch(&self, h: &Mat) -> (Mat, Mat, BeliefCache) {
        Self::belief_forward(&self.prior_hidden, &self.prior_out, h.clone(), self.config.latent_size)
    }

    fn posterior_batch(&self, x: &Mat, h: &Mat) -> (Mat, Mat, BeliefCache) {
        Self::belief_forward(&self.posterior_hidden, &self.posterior_out, Mat::hcat(&[x, h]), self.config.latent_size)
    }

    /// Decode `z` rows; row `r` uses recurrent state row `r / reps`.
    /// Returns `(x̂, hidden pre-activation, output pre-activation)`.
    fn decode_batch(&self, z: &Mat, h: &Mat, reps: usize) -> (Mat, Mat, Mat) {
        let d = self.config.decoder_net_size;
        let zs = self.config.latent_size;
        let mut hh = Mat::zeros(h.rows, d);
        for r in 0..h.rows {
            hh.row_mut(r).copy_from_slice(&self.decoder_hidden.bias.value);
        }
        self.decoder_hidden.forward_partial(h, zs, &mut hh);
        let mut pre = hh.repeat_rows(reps);
        self.decoder_hidden.forward_partial(z, 0, &mut pre);
        let mut act = pre.clone();
        relu_inplace(&mut act);
        let out_pre = self.decoder_out.forward(&act);
        (squash(&out_pre), pre, out_pre)
    }

    fn rnn_input(&self, x: &Mat, z: &Mat, a: Option<&Mat>) -> Mat {
        match a {
            Some(a) => Mat::hcat(&[x, z, a]),
            None => Mat::hcat(&[x, z]),
        }
    }

    fn check_h(&self, h: &RnnState) -> Result<()> {
        if h.hidden.len() != self.config.rnn_units {
            return Err(Error::Shape(format!("state has {} units, model {}", h.hidden.len(), self.config.rnn_units)));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.keypoint_dim() {
            return Err(Error::Shape(format!("keypoint vector has length {}, model expects {}", x.len(), self.config.keypoint_dim())));
        }
        Ok(())
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_size {
            return Err(Error::Shape(format!("latent has length {}, model expects {}", z.len(), self.config.latent_size)));
        }
        Ok(())
    }

    fn row_belief(mean: &Mat, std: &Mat, r: usize) -> GaussianBelief {
        GaussianBelief { mean: mean.row(r).to_vec(), stddev: std.row(r).to_vec() }
    }

    pub fn prior_step(&self, h: &RnnState) -> Result<GaussianBelief> {
        self.check_h(h)?;
        let (m, s, _) = self.prior_batch(&Mat::from_vec(1, h.hidden.len(), h.hidden.clone()));
        Ok(Self::row_belief(&m, &s, 0))
    }

    pub fn posterior_step(&self, h: &RnnState, x: &[f64]) -> Result<GaussianBelief> {
        self.check_h(h)?;
        self.check_x(x)?;
        let (m, s, _) = self.posterior_batch(&Mat::from_vec(1, x.len(), x.to_vec()), &Mat::from_vec(1, h.hidden.len(), h.hidden.clone()));
        Ok(Self::row_belief(&m, &s, 0))
    }

    pub fn decode_step(&self, z: &[f64], h: &RnnState) -> Result<Vec<f64>> {
        self.check_h(h)?;
        self.check_z(z)?;
        let (x, _, _) = self.decode_batch(&Mat::from_vec(1, z.len(), z.to_vec()), &Mat::from_vec(1, h.hidden.len(), h.hidden.clone()), 1);
        Ok(x.data)
    }

    /// Decode several latents against one state.
    pub fn decode_many(&self, zs: &[Vec<f64>], h: &RnnState) -> Result<Vec<Vec<f64>>> {
        self.check_h(h)?;
        for z in zs {
            self.check_z(z)?;
        }
        let (x, _, _) = self.decode_batch(&Mat::from_rows(zs), &Mat::from_vec(1, h.hidden.len(), h.hidden.clone()), zs.len());
        Ok((0..x.rows).map(|r| x.row(r).to_vec()).collect())
    }

    pub fn rnn_step(&self, x: &[f64], z: &[f64], h: &RnnState, action: Option<&[f64]>) -> Result<RnnState> {
        self.check_h(h)?;
        self.check_x(x)?;
        self.check_z(z)?;
        let a = self.check_action(action)?;
        let input = self.rnn_input(&Mat::from_vec(1, x.len(), x.to_vec()), &Mat::from_vec(1, z.len(), z.to_vec()), a.as_ref());
        let (hn, _) = self.rnn.forward(&input, &Mat::from_vec(1, h.hidden.len(), h.hidden.clone()));
        Ok(RnnState { hidden: hn.data })
    }

    fn check_action(&self, action: Option<&[f64]>) -> Result<Option<Mat>> {
        match (action, self.config.action_size) {
            (Some(_), 0) => Err(Error::Config("action given to a model configured without actions".into())),
            (None, n) if n > 0 => Err(Error::Config(format!("model expects actions of size {n}"))),
            (Some(a), n) if a.len() != n => Err(Error::Shape(format!("action has length {}, model expects {n}", a.len()))),
            (Some(a), _) => Ok(Some(Mat::from_vec(1, a.len(), a.to_vec()))),
            (None, _) => Ok(None),
        }
    }

    /// Sample `num_samples` trajectories: posterior on observed steps, prior
    /// afterwards.
    pub fn rollout(&self, req: &RolloutRequest<'_>) -> Result<Rollout> {
        let t_obs = req.observed.len();
        if t_obs == 0 {
            return Err(Error::Invalid("rollout needs at least one observed step".into()));
        }
        if req.num_samples == 0 {
            return Err(Error::Invalid("rollout needs at least one sample".into()));
        }
        for x in req.observed {
            self.check_x(x)?;
        }
        let steps = t_obs + req.predict_steps;
        let action_rows = self.rollout_actions(req.actions, steps)?;
        let s = req.num_samples;
        let zs = self.config.latent_size;
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut h = Mat::zeros(s, self.config.rnn_units);
        let mut trajectories = vec![Vec::with_capacity(steps); s];
        let mut beliefs = vec![Vec::with_capacity(steps); s];
        for t in 0..steps {
            let observed = if t < t_obs { Some(Mat::from_rows(&vec![req.observed[t].clone(); s])) } else { None };
            let (mean, std) = match &observed {
                Some(x) => {
                    let (m, sd, _) = self.posterior_batch(x, &h);
                    (m, sd)
                }
                None => {
                    let (m, sd, _) = self.prior_batch(&h);
                    (m, sd)
                }
            };
            let mut z = Mat::zeros(s, zs);
            for r in 0..s {
                for j in 0..zs {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    z.data[r * zs + j] = mean.data[r * zs + j] + req.noise_scale * std.data[r * zs + j] * e;
                }
            }
            let (xhat, _, _) = self.decode_batch(&z, &h, 1);
            for r in 0..s {
                trajectories[r].push(xhat.row(r).to_vec());
                beliefs[r].push(Self::row_belief(&mean, &std, r));
            }
            let feed = match (&observed, req.feed) {
                (Some(x), ObservedFeed::Detected) => x.clone(),
                _ => xhat,
            };
            let a = action_rows.as_ref().map(|rows| Mat::from_rows(&vec![rows[t].clone(); s]));
            let input = self.rnn_input(&feed, &z, a.as_ref());
            h = self.rnn.forward(&input, &h).0;
        }
        Ok(Rollout { trajectories, beliefs })
    }

    fn rollout_actions(&self, actions: Option<&[Vec<f64>]>, steps: usize) -> Result<Option<Vec<Vec<f64>>>> {
        match (actions, self.config.action_size) {
            (Some(_), 0) => Err(Error::Config("actions given to a model configured without actions".into())),
            (None, 0) => Ok(None),
            (None, n) => Err(Error::Config(format!("model expects actions of size {n}"))),
            (Some(a), n) => {
                if a.len() < steps || a.iter().any(|v| v.len() != n) {
                    return Err(Error::Shape(format!("need {steps} action vectors of length {n}")));
                }
                Ok(Some(a[..steps].to_vec()))
            }
        }
    }

    /// Training forward pass with per-step best-of-many selection.
    pub fn unroll(&self, batch: &UnrollBatch<'_>) -> Result<UnrollResult> {
        let steps = batch.targets.len();
        if steps == 0 || batch.observed_steps > steps {
            return Err(Error::Invalid("unroll needs 1 <= observed_steps <= steps".into()));
        }
        if batch.samples == 0 {
            return Err(Error::Invalid("best-of-many needs at least one sample".into()));
        }
        let rows = batch.targets[0].rows;
        let s = batch.samples;
        let zs = self.config.latent_size;
        let kd = self.config.keypoint_dim();
        if batch.noise.len() != steps || batch.feed_decoded.len() != steps {
            return Err(Error::Shape("noise and feed schedules must cover every step".into()));
        }
        match (batch.actions, self.config.action_size) {
            (Some(_), 0) => return Err(Error::Config("actions given to a model configured without actions".into())),
            (None, n) if n > 0 => return Err(Error::Config(format!("model expects actions of size {n}"))),
            (Some(a), _) if a.len() != steps => return Err(Error::Shape("actions must cover every step".into())),
            _ => {}
        }
        let mut h = Mat::zeros(rows, self.config.rnn_units);
        let mut out = UnrollResult { nll: Vec::new(), kl: Vec::new(), chosen: Vec::new(), decoded: Vec::new(), steps: Vec::with_capacity(steps) };
        for t in 0..steps {
            let target = &batch.targets[t];
            if target.rows != rows || target.cols != kd {
                return Err(Error::Shape(format!("targets at step {t} must be {rows} x {kd}")));
            }
            let noise = &batch.noise[t];
            if noise.rows != rows * s || noise.cols != zs {
                return Err(Error::Shape(format!("noise at step {t} must be {} x {zs}", rows * s)));
            }
            let (prior_mean, prior_std, prior) = self.prior_batch(&h);
            let posterior = if t < batch.observed_steps { Some(self.posterior_batch(target, &h)) } else { None };
            let (mean, std) = match &posterior {
                Some((m, sd, _)) => (m, sd),
                None => (&prior_mean, &prior_std),
            };
            let mut z = Mat::zeros(rows * s, zs);
            for b in 0..rows {
                for i in 0..s {
                    let r = b * s + i;
                    for j in 0..zs {
                        z.data[r * zs + j] = mean.data[b * zs + j] + std.data[b * zs + j] * noise.data[r * zs + j];
                    }
                }
            }
            let (xhat_all, pre_all, out_pre_all) = self.decode_batch(&z, &h, s);
            let mut best = Vec::with_capacity(rows);
            let mut nll = Vec::with_capacity(rows);
            for b in 0..rows {
                let mut best_i = 0;
                let mut best_v = f64::INFINITY;
                for i in 0..s {
                    let v = gaussian_nll(target.row(b), xhat_all.row(b * s + i));
                    if v < best_v {
                        best_v = v;
                        best_i = i;
                    }
                }
                best.push(b * s + best_i);
                nll.push(best_v);
            }
            let kl: Vec<f64> = match &posterior {
                Some((qm, qs, _)) => (0..rows)
                    .map(|b| {
                        (0..zs).map(|j| kl_diag_terms(qm.data[b * zs + j], qs.data[b * zs + j], prior_mean.data[b * zs + j], prior_std.data[b * zs + j]).0).sum()
                    })
                    .collect(),
                None => vec![0.0; rows],
            };
            let z_best = z.gather_rows(&best);
            let eps_best = noise.gather_rows(&best);
            let xhat = xhat_all.gather_rows(&best);
            let mut feed = target.clone();
            for b in 0..rows {
                if batch.feed_decoded[t][b] {
                    feed.row_mut(b).copy_from_slice(xhat.row(b));
                }
            }
            let input = self.rnn_input(&feed, &z_best, batch.actions.map(|a| &a[t]));
            let (h_next, gru) = self.rnn.forward(&input, &h);
            out.chosen.push(best.iter().map(|r| r % s).collect());
            out.nll.push(nll);
            out.kl.push(kl);
            out.decoded.push(xhat.clone());
            out.steps.push(StepCache {
                h_prev: h,
                prior,
                prior_mean,
                prior_std,
                posterior,
                eps_best,
                z_best,
                dec_hidden_pre: pre_all.gather_rows(&best),
                dec_out_pre: out_pre_all.gather_rows(&best),
                xhat,
                gru,
            });
            h = h_next;
        }
        Ok(out)
    }

    /// Accumulate gradients of [`UnrollResult::objective`] into the parameters.
    pub fn unroll_backward(&mut self, batch: &UnrollBatch<'_>, result: &UnrollResult, row_weights: &[f64]) {
        let steps = result.steps.len();
        let rows = batch.targets[0].rows;
        assert_eq!(row_weights.len(), rows);
        let zs = self.config.latent_size;
        let kd = self.config.keypoint_dim();
        let u = self.config.rnn_units;
        let mut dh = Mat::zeros(rows, u);
        for t in (0..steps).rev() {
            let c = &result.steps[t];
            let (d_in, dh_rnn) = self.rnn.backward(&c.gru, &dh);
            let mut dh_prev = dh_rnn;
            let d_feed = d_in.cols_slice(0, kd);
            let mut dz = d_in.cols_slice(kd, zs);

            // Best-sample likelihood and the decoded recurrence input.
            let target = &batch.targets[t];
            let mut d_xhat = Mat::zeros(rows, kd);
            for b in 0..rows {
                let w = row_weights[b];
                let feed_dec = batch.feed_decoded[t][b];
                for j in 0..kd {
                    let mut g = w * (c.xhat.data[b * kd + j] - target.data[b * kd + j]);
                    if feed_dec {
                        g += d_feed.data[b * kd + j];
                    }
                    d_xhat.data[b * kd + j] = g;
                }
            }
            let mut d_out_pre = d_xhat;
            for b in 0..rows {
                for j in 0..kd {
                    let i = b * kd + j;
                    let p = c.dec_out_pre.data[i];
                    d_out_pre.data[i] *= if j % 3 == 2 { sigmoid(p) } else { 1.0 - c.xhat.data[i] * c.xhat.data[i] };
                }
            }
            let mut act = c.dec_hidden_pre.clone();
            relu_inplace(&mut act);
            let mut d_hidden = self.decoder_out.backward(&act, &d_out_pre);
            relu_backward(&c.dec_hidden_pre, &mut d_hidden);
            self.decoder_hidden.backward_weights(&c.z_best, 0, &d_hidden);
            self.decoder_hidden.backward_weights(&c.h_prev, zs, &d_hidden);
            self.decoder_hidden.accumulate_bias(&d_hidden);
            dz.add_assign(&self.decoder_hidden.input_grad(&d_hidden, 0, zs));
            dh_prev.add_assign(&self.decoder_hidden.input_grad(&d_hidden, zs, u));

            // Reparameterisation z = m + s * eps.
            let mut d_mean = dz.clone();
            let mut d_std = dz;
            d_std.data.iter_mut().zip(&c.eps_best.data).for_each(|(g, e)| *g *= e);

            match &c.posterior {
                Some((qm, qs, cache)) => {
                    let mut dpm = Mat::zeros(rows, zs);
                    let mut dps = Mat::zeros(rows, zs);
                    for b in 0..rows {
                        let scale = row_weights[b] * batch.kl_weight;
                        if scale == 0.0 {
                            continue;
                        }
                        for j in 0..zs {
                            let i = b * zs + j;
                            let (_, dqm, dqs, dm, ds) = kl_diag_terms(qm.data[i], qs.data[i], c.prior_mean.data[i], c.prior_std.data[i]);
                            d_mean.data[i] += scale * dqm;
                            d_std.data[i] += scale * dqs;
                            dpm.data[i] = scale * dm;
                            dps.data[i] = scale * ds;
                        }
                    }
                    let d_post_in = Self::belief_backward(&mut self.posterior_hidden, &mut self.posterior_out, cache, &d_mean, &d_std);
                    dh_prev.add_assign(&d_post_in.cols_slice(kd, u));
                    let d_prior_in = Self::belief_backward(&mut self.prior_hidden, &mut self.prior_out, &c.prior, &dpm, &dps);
                    dh_prev.add_assign(&d_prior_in);
                }
                None => {
                    let d_prior_in = Self::belief_backward(&mut self.prior_hidden, &mut self.prior_out, &c.prior, &d_mean, &d_std);
                    dh_prev.add_assign(&d_prior_in);
                }
            }
            dh = dh_prev;
        }
    }
}

impl Parameterized<f64> for Vrnn {
    fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.prior_hidden.visit(f);
        self.prior_out.visit(f);
        self.posterior_hidden.visit(f);
        self.posterior_out.visit(f);
        self.decoder_hidden.visit(f);
        self.decoder_out.visit(f);
        self.rnn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.prior_hidden.visit_mut(f);
        self.prior_out.visit_mut(f);
        self.posterior_hidden.visit_mut(f);
        self.posterior_out.visit_mut(f);
        self.decoder_hidden.visit_mut(f);
        self.decoder_out.visit_mut(f);
        self.rnn.visit_mut(f);
    }
}

/// Draw standard normal noise matrices for an unroll.
pub fn draw_noise<R: rand::Rng + ?Sized>(rng: &mut R, steps: usize, rows: usize, cols: usize) -> Vec<Mat> {
    (0..steps)
        .map(|_| Mat::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()))
        .collect()
}
