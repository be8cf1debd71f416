//! Optimization loop, schedules, checkpoints and metrics logging.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{file_sha256, ArrayEntry, Checkpoint, CheckpointManifest, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{kl_anneal_at, lr_at, scheduled_sampling_prob_at, HyperParams, Phase};
pub use trainer::{MetricsAccumulator, StepOutcome, Trainer, METRICS_HEADER};
