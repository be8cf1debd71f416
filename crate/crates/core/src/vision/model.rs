use rand::Rng;
use serde::{Deserialize, Serialize};

use super::keypoints::{keypoint_from_map, keypoint_from_map_backward, render_blob, render_blob_backward};
use super::{DetectionMaps, Keypoint, KeypointSet, VideoSequence};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvBlock, ConvStack, Param, Parameterized, StackTrace, Tensor4};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_keypoints: usize,
    /// Channel width of each stride-2 stage; the map resolution is
    /// `image_size / 2^widths.len()`.
    pub widths: Vec<usize>,
    /// Size-preserving convolutions added at every scale.
    pub extra_layers_per_scale: usize,
    pub appearance_features: usize,
    /// Blob standard deviation in map pixels.
    pub sigma_kp: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            num_keypoints: 6,
            widths: vec![8, 16],
            extra_layers_per_scale: 1,
            appearance_features: 8,
            sigma_kp: 1.5,
        }
    }
}

impl VisionConfig {
    pub fn map_size(&self) -> usize {
        self.image_size >> self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("vision widths must be non-empty and positive".into()));
        }
        if !self.image_size.is_multiple_of(1 << self.widths.len()) || self.map_size() == 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.widths.len()
            )));
        }
        if self.num_keypoints == 0 || self.channels == 0 {
            return Err(Error::Config("num_keypoints and channels must be positive".into()));
        }
        if !(self.sigma_kp > 0.0) {
            return Err(Error::Config("sigma_kp must be positive".into()));
        }
        Ok(())
    }
}

/// Detector, appearance encoder and reconstructor.
#[derive(Debug, Clone)]
pub struct KeypointAutoencoder<T> {
    pub config: VisionConfig,
    pub detector: ConvStack<T>,
    pub appearance: ConvStack<T>,
    pub reconstructor: ConvStack<T>,
}

/// Forward activations of a training batch of `seqs` sequences with `len`
/// frames each; image index `n = seq * len + t`.
#[derive(Debug, Clone)]
pub struct VisionTrace<T> {
    pub seqs: usize,
    pub len: usize,
    det: StackTrace<T>,
    app: StackTrace<T>,
    rec: StackTrace<T>,
    /// `(x, y, μ)` per image and keypoint, index `n * K + k`.
    pub keypoints: Vec<(T, T, T)>,
    /// Unclipped reconstructions `(C, N, H, W)`.
    pub reconstruction: Tensor4<T>,
}

fn encoder<T: Real, R: Rng + ?Sized>(name: &str, cfg: &VisionConfig, out: usize, act: Activation, rng: &mut R) -> ConvStack<T> {
    let mut blocks = Vec::new();
    let mut in_ch = cfg.channels;
    let mut idx = 0;
    let mut push = |blocks: &mut Vec<ConvBlock<T>>, i: usize, o: usize, k: usize, s: usize, a: Activation, rng: &mut R| {
        blocks.push(ConvBlock { upsample: false, conv: Conv2d::new(&format!("{name}.conv{idx}"), i, o, k, s, rng), act: a });
        idx += 1;
    };
    for &w in &cfg.widths {
        push(&mut blocks, in_ch, w, 3, 2, Activation::LeakyRelu, rng);
        for _ in 0..cfg.extra_layers_per_scale {
            push(&mut blocks, w, w, 3, 1, Activation::LeakyRelu, rng);
        }
        in_ch = w;
    }
    push(&mut blocks, in_ch, out, 1, 1, act, rng);
    ConvStack { blocks }
}

fn decoder<T: Real, R: Rng + ?Sized>(name: &str, cfg: &VisionConfig, rng: &mut R) -> ConvStack<T> {
    let mut blocks = Vec::new();
    let mut in_ch = 2 * cfg.num_keypoints + cfg.appearance_features;
    let mut idx = 0;
    for (i, &w) in cfg.widths.iter().enumerate().rev() {
        let upsample = i + 1 != cfg.widths.len();
        blocks.push(ConvBlock { upsample, conv: Conv2d::new(&format!("{name}.conv{idx}"), in_ch, w, 3, 1, rng), act: Activation::LeakyRelu });
        idx += 1;
        for _ in 0..cfg.extra_layers_per_scale {
            blocks.push(ConvBlock { upsample: false, conv: Conv2d::new(&format!("{name}.conv{idx}"), w, w, 3, 1, rng), act: Activation::LeakyRelu });
            idx += 1;
        }
        in_ch = w;
    }
    blocks.push(ConvBlock { upsample: true, conv: Conv2d::new(&format!("{name}.conv{idx}"), in_ch, cfg.channels, 3, 1, rng), act: Activation::Linear });
    ConvStack { blocks }
}

fn check_finite<T: Real>(t: &Tensor4<T>, layer: &str) -> Result<()> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.to_string()))
    }
}

fn checked_forward<T: Real>(stack: &ConvStack<T>, x: &Tensor4<T>) -> Result<StackTrace<T>> {
    let trace = stack.forward_trace(x);
    if !trace.output.data.iter().all(|v| v.is_finite()) {
        // Re-run layer by layer to name the first offending layer.
        let mut cur = x.clone();
        for b in &stack.blocks {
            let single = ConvStack { blocks: vec![b.clone()] };
            cur = single.forward(&cur);
            check_finite(&cur, b.conv.weight.name.trim_end_matches(".kernel"))?;
        }
    }
    Ok(trace)
}

impl<T: Real> KeypointAutoencoder<T> {
    pub fn new<R: Rng + ?Sized>(config: VisionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let detector = encoder("detector", &config, config.num_keypoints, Activation::Softplus, rng);
        let appearance = encoder("appearance", &config, config.appearance_features, Activation::Linear, rng);
        let reconstructor = decoder("reconstructor", &config, rng);
        Ok(Self { config, detector, appearance, reconstructor })
    }

    fn num_keypoints(&self) -> usize {
        self.config.num_keypoints
    }

    /// Convert frames `H x W x C` (interleaved) to a `(C, N, H, W)` tensor.
    pub fn frames_to_tensor(&self, frames: &[&[f32]]) -> Result<Tensor4<T>> {
        let s = self.config.image_size;
        let c = self.config.channels;
        let mut t = Tensor4::zeros(c, frames.len(), s, s);
        for (n, f) in frames.iter().enumerate() {
            if f.len() != s * s * c {
                return Err(Error::Shape(format!("frame has {} values, expected {s}x{s}x{c}", f.len())));
            }
            for ch in 0..c {
                let plane = t.plane_mut(ch, n);
                for (i, p) in plane.iter_mut().enumerate() {
                    *p = T::c(f[i * c + ch] as f64);
                }
            }
        }
        Ok(t)
    }

    /// Inverse of [`Self::frames_to_tensor`].
    pub fn tensor_to_frames(t: &Tensor4<T>) -> Vec<Vec<f32>> {
        (0..t.n)
            .map(|n| {
                let mut f = vec![0f32; t.h * t.w * t.c];
                for ch in 0..t.c {
                    for (i, v) in t.plane(ch, n).iter().enumerate() {
                        f[i * t.c + ch] = v.to_f32().unwrap_or(f32::NAN);
                    }
                }
                f
            })
            .collect()
    }

    /// Raw maps `(K, N, Hm, Wm)` and keypoints of every image.
    pub fn detect_tensor(&self, frames: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<KeypointSet>)> {
        let trace = checked_forward(&self.detector, frames)?;
        let raw = trace.output;
        let keypoints = self.keypoints_of(&raw);
        Ok((raw, keypoints))
    }

    fn keypoints_of(&self, raw: &Tensor4<T>) -> Vec<KeypointSet> {
        (0..raw.n)
            .map(|n| {
                let points = (0..raw.c)
                    .map(|k| {
                        let (x, y, mu) = keypoint_from_map(raw.plane(k, n), raw.h, raw.w);
                        Keypoint::new(x.to_f64().unwrap(), y.to_f64().unwrap(), mu.to_f64().unwrap())
                    })
                    .collect();
                KeypointSet::new(points)
            })
            .collect()
    }

    /// Detect one `H x W x C` frame.
    pub fn detect(&self, frame: &[f32]) -> Result<(DetectionMaps, KeypointSet)> {
        let t = self.frames_to_tensor(&[frame])?;
        let (raw, mut kps) = self.detect_tensor(&t)?;
        let mut flat = Vec::with_capacity(raw.c * raw.plane_len());
        for k in 0..raw.c {
            flat.extend(raw.plane(k, 0).iter().map(|v| v.to_f64().unwrap()));
        }
        Ok((DetectionMaps::from_raw(raw.c, raw.h, raw.w, flat), kps.remove(0)))
    }

    /// Keypoints for every frame of a video.
    pub fn detect_video(&self, video: &VideoSequence) -> Result<Vec<KeypointSet>> {
        let frames: Vec<&[f32]> = (0..video.frames).map(|t| video.frame(t)).collect();
        let mut out = Vec::with_capacity(video.frames);
        for chunk in frames.chunks(16) {
            let t = self.frames_to_tensor(chunk)?;
            out.extend(self.detect_tensor(&t)?.1);
        }
        Ok(out)
    }

    fn blob_tensor(&self, kps: &[KeypointSet]) -> Tensor4<T> {
        let m = self.config.map_size();
        let k = self.num_keypoints();
        let mut t = Tensor4::zeros(k, kps.len(), m, m);
        for (n, set) in kps.iter().enumerate() {
            for (kk, p) in set.points.iter().enumerate() {
                render_blob((T::c(p.x), T::c(p.y), T::c(p.mu)), m, m, self.config.sigma_kp, t.plane_mut(kk, n));
            }
        }
        t
    }

    fn check_k(&self, set: &KeypointSet) -> Result<()> {
        if set.len() != self.num_keypoints() {
            return Err(Error::Config(format!("model has K = {} keypoints, got {}", self.num_keypoints(), set.len())));
        }
        Ok(())
    }

    /// Reconstruct frames for several keypoint sets against one reference
    /// frame. Outputs are unclipped `H x W x C`.
    pub fn reconstruct_many(&self, first_frame: &[f32], first: &KeypointSet, current: &[KeypointSet]) -> Result<Vec<Vec<f32>>> {
        self.check_k(first)?;
        for c in current {
            self.check_k(c)?;
        }
        let n = current.len();
        let v1 = self.frames_to_tensor(&[first_frame])?;
        let app = checked_forward(&self.appearance, &v1)?.output;
        let cur = self.blob_tensor(current);
        let firsts = self.blob_tensor(&vec![first.clone(); n]);
        let app_rep = repeat_images(&app, n);
        let input = Tensor4::concat_channels(&[&cur, &firsts, &app_rep]);
        let mut out = checked_forward(&self.reconstructor, &input)?.output;
        for ch in 0..out.c {
            let base = v1.plane(ch, 0).to_vec();
            for i in 0..n {
                for (o, b) in out.plane_mut(ch, i).iter_mut().zip(&base) {
                    *o = *o + *b;
                }
            }
        }
        Ok(Self::tensor_to_frames(&out))
    }

    pub fn reconstruct(&self, first_frame: &[f32], first: &KeypointSet, current: &KeypointSet) -> Result<Vec<f32>> {
        Ok(self.reconstruct_many(first_frame, first, std::slice::from_ref(current))?.remove(0))
    }

    /// Forward pass over `seqs` sequences of `len` frames laid out as
    /// `n = seq * len + t`.
    pub fn forward_train(&self, frames: &Tensor4<T>, seqs: usize, len: usize) -> Result<VisionTrace<T>> {
        if frames.n != seqs * len {
            return Err(Error::Shape(format!("{} images for {seqs} sequences of {len}", frames.n)));
        }
        let k = self.num_keypoints();
        let det = checked_forward(&self.detector, frames)?;
        let raw = &det.output;
        let mut keypoints = Vec::with_capacity(frames.n * k);
        for n in 0..frames.n {
            for kk in 0..k {
                keypoints.push(keypoint_from_map(raw.plane(kk, n), raw.h, raw.w));
            }
        }
        let firsts = gather_images(frames, &(0..seqs).map(|b| b * len).collect::<Vec<_>>());
        let app = checked_forward(&self.appearance, &firsts)?;

        let m = self.config.map_size();
        let mut cur = Tensor4::zeros(k, frames.n, m, m);
        let mut first_blobs = Tensor4::zeros(k, frames.n, m, m);
        for n in 0..frames.n {
            let n1 = (n / len) * len;
            for kk in 0..k {
                render_blob(keypoints[n * k + kk], m, m, self.config.sigma_kp, cur.plane_mut(kk, n));
                render_blob(keypoints[n1 * k + kk], m, m, self.config.sigma_kp, first_blobs.plane_mut(kk, n));
            }
        }
        let app_rep = expand_per_sequence(&app.output, len);
        let input = Tensor4::concat_channels(&[&cur, &first_blobs, &app_rep]);
        let rec = checked_forward(&self.reconstructor, &input)?;
        let mut reconstruction = rec.output.clone();
        for ch in 0..reconstruction.c {
            for n in 0..frames.n {
                let n1 = (n / len) * len;
                let base = frames.plane(ch, n1).to_vec();
                for (o, b) in reconstruction.plane_mut(ch, n).iter_mut().zip(&base) {
                    *o = *o + *b;
                }
            }
        }
        Ok(VisionTrace { seqs, len, det, app, rec, keypoints, reconstruction })
    }

    /// Accumulate parameter gradients given the loss gradient with respect to
    /// the reconstructions and any direct gradient on the keypoints.
    pub fn backward_train(&mut self, trace: &VisionTrace<T>, d_recon: &Tensor4<T>, d_keypoints: &[(T, T, T)]) {
        let k = self.num_keypoints();
        let m = self.config.map_size();
        let f = self.config.appearance_features;
        let len = trace.len;
        let n_img = trace.seqs * len;
        assert_eq!(d_keypoints.len(), n_img * k);

        let d_in = self.reconstructor.backward(&trace.rec, d_recon.clone());
        let parts = d_in.split_channels(&[k, k, f]);
        let (d_cur, d_first, d_app_rep) = (&parts[0], &parts[1], &parts[2]);

        let mut d_kp = d_keypoints.to_vec();
        let sigma = self.config.sigma_kp;
        for n in 0..n_img {
            let n1 = (n / len) * len;
            for kk in 0..k {
                let (dx, dy, dm) = render_blob_backward(trace.keypoints[n * k + kk], m, m, sigma, d_cur.plane(kk, n));
                let e = &mut d_kp[n * k + kk];
                *e = (e.0 + dx, e.1 + dy, e.2 + dm);
                let (dx, dy, dm) = render_blob_backward(trace.keypoints[n1 * k + kk], m, m, sigma, d_first.plane(kk, n));
                let e = &mut d_kp[n1 * k + kk];
                *e = (e.0 + dx, e.1 + dy, e.2 + dm);
            }
        }

        let raw = &trace.det.output;
        let mut d_raw = Tensor4::zeros(raw.c, raw.n, raw.h, raw.w);
        for n in 0..n_img {
            for kk in 0..k {
                let (dx, dy, dm) = d_kp[n * k + kk];
                let g = keypoint_from_map_backward(raw.plane(kk, n), raw.h, raw.w, dx, dy, dm);
                d_raw.plane_mut(kk, n).copy_from_slice(&g);
            }
        }
        self.detector.backward(&trace.det, d_raw);

        let mut d_app = Tensor4::zeros(f, trace.seqs, m, m);
        for ch in 0..f {
            for b in 0..trace.seqs {
                for t in 0..len {
                    let src = d_app_rep.plane(ch, b * len + t).to_vec();
                    for (d, s) in d_app.plane_mut(ch, b).iter_mut().zip(&src) {
                        *d = *d + *s;
                    }
                }
            }
        }
        self.appearance.backward(&trace.app, d_app);
    }
}

fn gather_images<T: Real>(t: &Tensor4<T>, idx: &[usize]) -> Tensor4<T> {
    let mut out = Tensor4::zeros(t.c, idx.len(), t.h, t.w);
    for c in 0..t.c {
        for (i, &n) in idx.iter().enumerate() {
            out.plane_mut(c, i).copy_from_slice(t.plane(c, n));
        }
    }
    out
}

fn repeat_images<T: Real>(t: &Tensor4<T>, times: usize) -> Tensor4<T> {
    gather_images(t, &vec![0; times])
}

/// Image `b` of `t` repeated `len` times, for every `b`.
fn expand_per_sequence<T: Real>(t: &Tensor4<T>, len: usize) -> Tensor4<T> {
    let idx: Vec<usize> = (0..t.n).flat_map(|b| std::iter::repeat_n(b, len)).collect();
    gather_images(t, &idx)
}

impl<T: Real> Parameterized<T> for KeypointAutoencoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.detector.visit(f);
        self.appearance.visit(f);
        self.reconstructor.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.detector.visit_mut(f);
        self.appearance.visit_mut(f);
        self.reconstructor.visit_mut(f);
    }
}
