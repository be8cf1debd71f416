use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::vision::VisionConfig;

/// Every knob of a training run. Serialized as the JSON config file; missing
/// keys take their default values and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub num_keypoints: usize,
    pub observed_steps: usize,
    pub predicted_steps: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    pub lr_halving_interval: u64,
    pub total_steps: u64,
    pub beta: f64,
    pub kl_anneal_steps: u64,
    pub lambda_sep: f64,
    pub lambda_sparse: f64,
    pub sigma_sep: f64,
    /// Blob width in feature-map pixels.
    pub sigma_kp: f64,
    pub latent_size: usize,
    pub prior_net_size: usize,
    pub posterior_net_size: usize,
    pub decoder_net_size: usize,
    pub rnn_units: usize,
    pub bom_samples: usize,
    /// Pick one best sample per sequence instead of per step.
    pub bom_per_sequence: bool,
    pub ss_final_observed: f64,
    pub ss_final_predicted: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub extra_layers_per_scale: usize,
    pub appearance_features: usize,
    /// Zero disables action conditioning.
    pub action_size: usize,
    pub log_interval: u64,
    /// Steps between checkpoints; zero keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for HyperParams {
    /// Desk-scale configuration sized for a single CPU core.
    fn default() -> Self {
        Self {
            num_keypoints: 6,
            observed_steps: 8,
            predicted_steps: 8,
            batch_size: 4,
            init_lr: 1e-3,
            lr_halving_interval: 6_000,
            total_steps: 20_000,
            beta: 1e-2,
            kl_anneal_steps: 5_000,
            lambda_sep: 0.1,
            lambda_sparse: 0.1,
            sigma_sep: 2e-2,
            sigma_kp: 1.5,
            latent_size: 16,
            prior_net_size: 16,
            posterior_net_size: 128,
            decoder_net_size: 128,
            rnn_units: 128,
            bom_samples: 50,
            bom_per_sequence: false,
            ss_final_observed: 1.0,
            ss_final_predicted: 0.5,
            weight_decay: 1e-4,
            grad_clip_norm: None,
            seed: 0,
            image_size: 64,
            channels: 3,
            widths: vec![8, 16],
            extra_layers_per_scale: 1,
            appearance_features: 8,
            action_size: 0,
            log_interval: 100,
            checkpoint_interval: 5_000,
        }
    }
}

impl HyperParams {
    /// Full-size schedule and network widths: 12 keypoints, batch 32,
    /// 512 RNN units and 10⁵ steps.
    pub fn full_preset() -> Self {
        Self {
            num_keypoints: 12,
            batch_size: 32,
            lr_halving_interval: 30_000,
            total_steps: 100_000,
            kl_anneal_steps: 25_000,
            rnn_units: 512,
            widths: vec![32, 64, 128],
            extra_layers_per_scale: 1,
            appearance_features: 32,
            checkpoint_interval: 10_000,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "full" => Ok(Self::full_preset()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }

    pub fn window_len(&self) -> usize {
        self.observed_steps + self.predicted_steps
    }

    pub fn vision_config(&self) -> VisionConfig {
        VisionConfig {
            image_size: self.image_size,
            channels: self.channels,
            num_keypoints: self.num_keypoints,
            widths: self.widths.clone(),
            extra_layers_per_scale: self.extra_layers_per_scale,
            appearance_features: self.appearance_features,
            sigma_kp: self.sigma_kp,
        }
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig {
            num_keypoints: self.num_keypoints,
            latent_size: self.latent_size,
            prior_net_size: self.prior_net_size,
            posterior_net_size: self.posterior_net_size,
            decoder_net_size: self.decoder_net_size,
            rnn_units: self.rnn_units,
            action_size: self.action_size,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_keypoints", self.num_keypoints),
            ("observed_steps", self.observed_steps),
            ("batch_size", self.batch_size),
            ("latent_size", self.latent_size),
            ("prior_net_size", self.prior_net_size),
            ("posterior_net_size", self.posterior_net_size),
            ("decoder_net_size", self.decoder_net_size),
            ("rnn_units", self.rnn_units),
            ("bom_samples", self.bom_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.lr_halving_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config("lr_halving_interval and log_interval must be positive".into()));
        }
        let reals = [("init_lr", self.init_lr), ("sigma_sep", self.sigma_sep), ("sigma_kp", self.sigma_kp)];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let non_negative = [("beta", self.beta), ("lambda_sep", self.lambda_sep), ("lambda_sparse", self.lambda_sparse), ("weight_decay", self.weight_decay)];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [("ss_final_observed", self.ss_final_observed), ("ss_final_predicted", self.ss_final_predicted)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip_norm must be positive".into()));
            }
        }
        self.vision_config().validate()?;
        self.dynamics_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hp: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `init_lr · 0.5^⌊step / interval⌋`.
pub fn lr_at(hp: &HyperParams, step: u64) -> f64 {
    hp.init_lr * 0.5f64.powi((step / hp.lr_halving_interval) as i32)
}

/// Linear ramp from 0 to 1 over `kl_anneal_steps`.
pub fn kl_anneal_at(hp: &HyperParams, step: u64) -> f64 {
    if hp.kl_anneal_steps == 0 {
        return 1.0;
    }
    (step as f64 / hp.kl_anneal_steps as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Observed,
    Predicted,
}

/// Probability of feeding the model's own decoded keypoints into the
/// recurrence, ramped linearly over the whole run.
pub fn scheduled_sampling_prob_at(hp: &HyperParams, step: u64, phase: Phase) -> f64 {
    let progress = if hp.total_steps == 0 { 1.0 } else { (step as f64 / hp.total_steps as f64).min(1.0) };
    let end = match phase {
        Phase::Observed => hp.ss_final_observed,
        Phase::Predicted => hp.ss_final_predicted,
    };
    end * progress
}
