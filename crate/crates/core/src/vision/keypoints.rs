//! Conversions between score maps and `(x, y, μ)` keypoints.
//!
//! Coordinates are normalised to `[-1, 1]`, `x` to the right and `y`
//! downwards, with the centre of pixel `i` of an `n`-pixel axis at
//! `-1 + (2i + 1) / n`.

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Added to the score-map sum before normalising.
pub const NORMALIZATION_EPS: f64 = 1e-8;

/// One keypoint: location plus presence scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub mu: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, mu: f64) -> Self {
        Self { x, y, mu }
    }
}

/// Normalised coordinate of the centre of pixel `i` on an axis of `n` pixels.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Normalised coordinate to continuous pixel index (pixel centres are integers).
#[inline]
pub fn to_pixel_units(coord: f64, n: usize) -> f64 {
    (coord + 1.0) * n as f64 / 2.0 - 0.5
}

#[inline]
fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("representable")
}

/// Channel-normalised detection weights `D = R / (ΣR + ε)`.
pub fn normalize_map<T: Float>(raw: &[T]) -> Vec<T> {
    let total = raw.iter().fold(T::zero(), |a, &b| a + b) + cast(NORMALIZATION_EPS);
    raw.iter().map(|&r| r / total).collect()
}

/// Spatial expectation of pixel-centre coordinates under the normalised map,
/// and the presence scale (mean raw value).
pub fn keypoint_from_map<T: Float>(raw: &[T], h: usize, w: usize) -> (T, T, T) {
    debug_assert_eq!(raw.len(), h * w);
    let mut total = T::zero();
    let mut sx = T::zero();
    let mut sy = T::zero();
    for v in 0..h {
        let gy: T = cast(pixel_center(v, h));
        let row = &raw[v * w..(v + 1) * w];
        for (u, &r) in row.iter().enumerate() {
            total = total + r;
            sx = sx + r * cast(pixel_center(u, w));
            sy = sy + r * gy;
        }
    }
    let denom = total + cast(NORMALIZATION_EPS);
    (sx / denom, sy / denom, total / cast((h * w) as f64))
}

/// Gradient of a loss with respect to the raw map, given the loss gradient
/// with respect to the keypoint `(x, y, μ)` produced by [`keypoint_from_map`].
pub fn keypoint_from_map_backward<T: Float>(raw: &[T], h: usize, w: usize, dx: T, dy: T, dmu: T) -> Vec<T> {
    let (x, y, _) = keypoint_from_map(raw, h, w);
    let total = raw.iter().fold(T::zero(), |a, &b| a + b) + cast(NORMALIZATION_EPS);
    let dmu_px = dmu / cast((h * w) as f64);
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        let gy: T = cast(pixel_center(v, h));
        for u in 0..w {
            let gx: T = cast(pixel_center(u, w));
            out.push((dx * (gx - x) + dy * (gy - y)) / total + dmu_px);
        }
    }
    out
}

/// Gaussian blob of standard deviation `sigma` (map pixels) centred at the
/// keypoint, scaled by `μ`.
pub fn render_blob<T: Float>(kp: (T, T, T), h: usize, w: usize, sigma: f64, out: &mut [T]) {
    let (x, y, mu) = kp;
    let px = (x + T::one()) * cast(w as f64 / 2.0) - cast(0.5);
    let py = (y + T::one()) * cast(h as f64 / 2.0) - cast(0.5);
    let inv = cast::<T>(1.0 / (2.0 * sigma * sigma));
    let gx: Vec<T> = (0..w).map(|u| (-(cast::<T>(u as f64) - px).powi(2) * inv).exp()).collect();
    for v in 0..h {
        let gyv = (-(cast::<T>(v as f64) - py).powi(2) * inv).exp() * mu;
        for u in 0..w {
            out[v * w + u] = gyv * gx[u];
        }
    }
}

/// Gradient of a loss with respect to `(x, y, μ)` of a rendered blob.
pub fn render_blob_backward<T: Float>(kp: (T, T, T), h: usize, w: usize, sigma: f64, d_map: &[T]) -> (T, T, T) {
    let (x, y, mu) = kp;
    let px = (x + T::one()) * cast(w as f64 / 2.0) - cast(0.5);
    let py = (y + T::one()) * cast(h as f64 / 2.0) - cast(0.5);
    let inv = cast::<T>(1.0 / (2.0 * sigma * sigma));
    let inv_s2 = cast::<T>(1.0 / (sigma * sigma));
    let gx: Vec<T> = (0..w).map(|u| (-(cast::<T>(u as f64) - px).powi(2) * inv).exp()).collect();
    let (mut dmu, mut dpx, mut dpy) = (T::zero(), T::zero(), T::zero());
    for v in 0..h {
        let dyv = cast::<T>(v as f64) - py;
        let gyv = (-dyv * dyv * inv).exp();
        for u in 0..w {
            let g = gyv * gx[u];
            let d = d_map[v * w + u];
            if d == T::zero() {
                continue;
            }
            dmu = dmu + d * g;
            let t = d * mu * g * inv_s2;
            dpx = dpx + t * (cast::<T>(u as f64) - px);
            dpy = dpy + t * dyv;
        }
    }
    (dpx * cast(w as f64 / 2.0), dpy * cast(h as f64 / 2.0), dmu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_is_centred() {
        let raw = vec![0.3f64; 256];
        let (x, y, mu) = keypoint_from_map(&raw, 16, 16);
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
        assert!((mu - 0.3).abs() < 1e-12);
    }

    #[test]
    fn delta_map_hits_corner_pixel_centre() {
        let mut raw = vec![0.0f64; 256];
        raw[0] = 1.0;
        let (x, y, _) = keypoint_from_map(&raw, 16, 16);
        let want = -1.0 + 1.0 / 16.0;
        assert!((x - want).abs() < 1e-7 && (y - want).abs() < 1e-7);
    }

    #[test]
    fn normalized_map_sums_to_one() {
        let raw: Vec<f64> = (0..256).map(|i| 0.01 + (i % 7) as f64).collect();
        let s: f64 = normalize_map(&raw).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn blob_peak_and_neighbour() {
        let mut out = vec![0.0f64; 256];
        let c = pixel_center(5, 16);
        render_blob((c, pixel_center(9, 16), 1.0), 16, 16, 1.5, &mut out);
        assert_eq!(out[9 * 16 + 5], 1.0);
        assert!((out[9 * 16 + 6] - (-1.0f64 / (2.0 * 2.25)).exp()).abs() < 1e-15);
        assert!((out[9 * 16 + 6] - 0.8007).abs() < 1e-4);
    }

    #[test]
    fn zero_scale_blob_is_empty() {
        let mut out = vec![1.0f64; 64];
        render_blob((0.1, -0.2, 0.0), 8, 8, 1.5, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blob_backward_matches_finite_differences() {
        let d_map: Vec<f64> = (0..256).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
        let kp = (0.13, -0.31, 0.8);
        let f = |k: (f64, f64, f64)| {
            let mut m = vec![0.0; 256];
            render_blob(k, 16, 16, 1.5, &mut m);
            m.iter().zip(&d_map).map(|(a, b)| a * b).sum::<f64>()
        };
        let (dx, dy, dmu) = render_blob_backward(kp, 16, 16, 1.5, &d_map);
        let e = 1e-6;
        let fdx = (f((kp.0 + e, kp.1, kp.2)) - f((kp.0 - e, kp.1, kp.2))) / (2.0 * e);
        let fdy = (f((kp.0, kp.1 + e, kp.2)) - f((kp.0, kp.1 - e, kp.2))) / (2.0 * e);
        let fdm = (f((kp.0, kp.1, kp.2 + e)) - f((kp.0, kp.1, kp.2 - e))) / (2.0 * e);
        assert!((dx - fdx).abs() < 1e-7 && (dy - fdy).abs() < 1e-7 && (dmu - fdm).abs() < 1e-7);
    }
}
