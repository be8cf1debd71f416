//! The full model: keypoint autoencoder plus keypoint dynamics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::Vrnn;
use crate::error::{Error, Result};
use crate::training::HyperParams;
use crate::vision::{KeypointAutoencoder, KeypointSet, VideoSequence};

#[derive(Debug, Clone)]
pub struct KeypointDynamicsModel {
    pub hyper: HyperParams,
    pub vision: KeypointAutoencoder<f32>,
    pub dynamics: Vrnn,
}

impl KeypointDynamicsModel {
    /// Fresh weights drawn from `hyper.seed`.
    pub fn new(hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let vision = KeypointAutoencoder::new(hyper.vision_config(), &mut rng)?;
        let dynamics = Vrnn::new(hyper.dynamics_config(), &mut rng)?;
        Ok(Self { hyper, vision, dynamics })
    }

    pub fn num_keypoints(&self) -> usize {
        self.hyper.num_keypoints
    }

    pub fn check_video(&self, video: &VideoSequence) -> Result<()> {
        let s = self.hyper.image_size;
        if video.height != s || video.width != s || video.channels != self.hyper.channels {
            return Err(Error::Shape(format!(
                "video is {}x{}x{}, model expects {s}x{s}x{}",
                video.height, video.width, video.channels, self.hyper.channels
            )));
        }
        Ok(())
    }

    /// Detected keypoints of every frame.
    pub fn detect(&self, video: &VideoSequence) -> Result<Vec<KeypointSet>> {
        self.check_video(video)?;
        self.vision.detect_video(video)
    }

    /// Decode keypoint sets into frames using the first frame of `video` as
    /// the appearance reference.
    pub fn render(&self, video: &VideoSequence, first: &KeypointSet, sets: &[KeypointSet]) -> Result<Vec<Vec<f32>>> {
        self.check_video(video)?;
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(16) {
            out.extend(self.vision.reconstruct_many(video.frame(0), first, chunk)?);
        }
        Ok(out)
    }
}
