//! Unsupervised keypoint discovery and stochastic keypoint dynamics for
//! video prediction.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod manipulation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod real;
pub mod synthdata;
pub mod training;
pub mod vision;

pub use dynamics::{DynamicsConfig, GaussianBelief, ObservedFeed, RnnState, Rollout, RolloutRequest, Vrnn};
pub use error::{Error, Result};
pub use objectives::LossBreakdown;
pub use vision::{DetectionMaps, Keypoint, KeypointAutoencoder, KeypointSet, VideoSequence, VisionConfig};
pub use model::KeypointDynamicsModel;
pub use training::{Checkpoint, HyperParams, Trainer};
