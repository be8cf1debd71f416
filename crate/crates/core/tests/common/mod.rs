#![allow(dead_code)]

use kpdyn_core::synthdata::{generate_bouncing_dots, Dataset, SceneConfig, SplitSizes};
use kpdyn_core::HyperParams;

/// A model small enough to train for a few hundred steps in a test.
pub fn tiny() -> HyperParams {
    HyperParams {
        num_keypoints: 2,
        observed_steps: 2,
        predicted_steps: 2,
        batch_size: 2,
        total_steps: 200,
        lr_halving_interval: 1000,
        kl_anneal_steps: 50,
        latent_size: 2,
        prior_net_size: 4,
        posterior_net_size: 4,
        decoder_net_size: 4,
        rnn_units: 4,
        bom_samples: 3,
        image_size: 16,
        widths: vec![4],
        extra_layers_per_scale: 0,
        appearance_features: 2,
        log_interval: 20,
        checkpoint_interval: 0,
        ..HyperParams::default()
    }
}

/// 16 px two-dot sequences of six frames.
pub fn data() -> Dataset {
    let scene = SceneConfig { num_objects: 2, object_radius: 1.5, image_size: 16, sequence_length: 6, seed: 1, ..SceneConfig::default() };
    generate_bouncing_dots(&scene, SplitSizes { train: 8, test: 2 }).unwrap()
}
