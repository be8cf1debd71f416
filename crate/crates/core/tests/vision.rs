use kpdyn_core::nn::Parameterized;
use kpdyn_core::vision::{keypoint_from_map, keypoint_from_map_backward, pixel_center, render_blobs, to_pixel_units};
use kpdyn_core::{DetectionMaps, Keypoint, KeypointAutoencoder, KeypointSet, VisionConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const M: usize = 16;

fn random_frame(rng: &mut ChaCha8Rng, cfg: &VisionConfig) -> Vec<f32> {
    (0..cfg.image_size * cfg.image_size * cfg.channels).map(|_| rng.gen::<f32>()).collect()
}

#[test]
fn uniform_map_gives_image_centre() {
    let (x, y, mu) = keypoint_from_map(&vec![0.3f64; M * M], M, M);
    assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
    assert!((mu - 0.3).abs() < 1e-12);
}

#[test]
fn one_hot_map_gives_corner_pixel_centre() {
    let mut raw = vec![0.0; M * M];
    raw[0] = 1.0;
    let (x, y, _) = keypoint_from_map(&raw, M, M);
    let expected = -1.0 + 1.0 / M as f64;
    assert!((x - expected).abs() < 1e-7 && (y - expected).abs() < 1e-7, "({x}, {y})");
}

#[test]
fn scaled_map_keeps_location_and_scales_mu() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<f64> = (0..M * M).map(|_| rng.gen_range(0.01..2.0)).collect();
    let c = 3.7;
    let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
    let (x0, y0, m0) = keypoint_from_map(&raw, M, M);
    let (x1, y1, m1) = keypoint_from_map(&scaled, M, M);
    assert!((x0 - x1).abs() < 1e-12 && (y0 - y1).abs() < 1e-12);
    assert!((m1 - c * m0).abs() < 1e-12 * m1.abs().max(1.0));
}

#[test]
fn blob_examples() {
    // Odd grid so that (0, 0) is a pixel centre.
    let n = 15;
    let blob = render_blobs(&KeypointSet::new(vec![Keypoint::new(0.0, 0.0, 1.0)]), (n, n), 1.5).unwrap();
    assert_eq!(blob[7 * n + 7], 1.0);
    assert!((blob[7 * n + 8] - (-1.0f64 / (2.0 * 1.5 * 1.5)).exp()).abs() < 1e-15);
    assert!((blob[7 * n + 8] - 0.8007).abs() < 1e-4);

    let zero = render_blobs(&KeypointSet::new(vec![Keypoint::new(0.3, -0.2, 0.0)]), (M, M), 1.5).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    assert!(render_blobs(&KeypointSet::new(vec![Keypoint::new(0.0, 0.0, 1.0)]), (M, M), 0.0).is_err());
}

#[test]
fn zero_final_layer_reconstructs_first_frame_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = VisionConfig { image_size: 16, widths: vec![4, 4], appearance_features: 2, num_keypoints: 3, ..Default::default() };
    let mut ae = KeypointAutoencoder::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let last = ae.reconstructor.blocks.last_mut().unwrap();
    last.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
    last.conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
    let frame = random_frame(&mut rng, &cfg);
    let (_, first) = ae.detect(&frame).unwrap();
    let moved = KeypointSet::new(first.points.iter().map(|p| Keypoint::new(-p.x, p.y, p.mu + 1.0)).collect());
    assert_eq!(ae.reconstruct(&frame, &first, &moved).unwrap(), frame);
}

#[test]
fn keypoint_count_mismatch_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = VisionConfig { image_size: 16, widths: vec![4], appearance_features: 2, num_keypoints: 3, ..Default::default() };
    let ae = KeypointAutoencoder::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let frame = random_frame(&mut rng, &cfg);
    let two = KeypointSet::new(vec![Keypoint::default(); 2]);
    let err = ae.reconstruct(&frame, &two, &two).unwrap_err();
    assert!(matches!(err, kpdyn_core::Error::Config(_)), "{err}");
}

#[test]
fn detect_returns_normalized_maps_and_valid_keypoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = VisionConfig { image_size: 32, widths: vec![4, 8], appearance_features: 2, num_keypoints: 4, ..Default::default() };
    let ae = KeypointAutoencoder::<f32>::new(cfg.clone(), &mut rng).unwrap();
    assert!(ae.num_params() > 0);
    let frame = random_frame(&mut rng, &cfg);
    let (maps, kps) = ae.detect(&frame).unwrap();
    assert_eq!((maps.num_keypoints, maps.height, maps.width), (4, 8, 8));
    assert!(maps.raw.iter().all(|&v| v > 0.0));
    for k in 0..4 {
        let s: f64 = maps.normalized[k * 64..(k + 1) * 64].iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    assert!(kps.is_valid());
    // The frame-level keypoints agree with the maps they came from.
    let again = maps.keypoints();
    for (a, b) in again.points.iter().zip(&kps.points) {
        assert!((a.x - b.x).abs() < 1e-5 && (a.y - b.y).abs() < 1e-5 && (a.mu - b.mu).abs() < 1e-5 * a.mu.max(1.0));
    }
}

#[test]
fn detection_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<f64> = (0..M * M).map(|_| rng.gen_range(0.1..1.0)).collect();
    let (gx, gy, gm) = (0.7, -1.3, 0.4);
    let f = |r: &[f64]| {
        let (x, y, m) = keypoint_from_map(r, M, M);
        gx * x + gy * y + gm * m
    };
    let grad = keypoint_from_map_backward(&raw, M, M, gx, gy, gm);
    let eps = 1e-3;
    for i in 0..raw.len() {
        let mut p = raw.clone();
        let mut m = raw.clone();
        p[i] += eps;
        m[i] -= eps;
        let fd = (f(&p) - f(&m)) / (2.0 * eps);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12);
        assert!(rel < 1e-4, "pixel {i}: analytic {} fd {fd}", grad[i]);
    }
}

fn raw_map() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..10.0, M * M)
}

proptest! {
    #[test]
    fn normalized_channels_sum_to_one(raw in prop::collection::vec(1e-6f64..10.0, 2 * M * M)) {
        let maps = DetectionMaps::from_raw(2, M, M, raw);
        for k in 0..2 {
            let s: f64 = maps.normalized[k * M * M..(k + 1) * M * M].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn coordinates_stay_inside_pixel_centre_hull(raw in raw_map()) {
        let (x, y, mu) = keypoint_from_map(&raw, M, M);
        let lo = pixel_center(0, M);
        let hi = pixel_center(M - 1, M);
        prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        prop_assert!(mu >= 0.0);
    }

    #[test]
    fn rescaling_a_channel_moves_nothing(raw in raw_map(), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        let (x0, y0, m0) = keypoint_from_map(&raw, M, M);
        let (x1, y1, m1) = keypoint_from_map(&scaled, M, M);
        prop_assert!((x0 - x1).abs() < 1e-9 && (y0 - y1).abs() < 1e-9);
        prop_assert!((m1 - c * m0).abs() <= 1e-9 * m1.abs().max(1e-9));
    }

    #[test]
    fn blob_argmax_is_nearest_grid_point(x in -0.95f64..0.95, y in -0.95f64..0.95, mu in 0.1f64..5.0) {
        let blob = render_blobs(&KeypointSet::new(vec![Keypoint::new(x, y, mu)]), (M, M), 1.5).unwrap();
        let (arg, _) = blob.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        let nu = to_pixel_units(x, M).round().clamp(0.0, (M - 1) as f64) as usize;
        let nv = to_pixel_units(y, M).round().clamp(0.0, (M - 1) as f64) as usize;
        // Exact ties (keypoint midway between pixels) may go either way.
        let du = (to_pixel_units(x, M) - to_pixel_units(x, M).floor() - 0.5).abs();
        let dv = (to_pixel_units(y, M) - to_pixel_units(y, M).floor() - 0.5).abs();
        prop_assume!(du > 1e-9 && dv > 1e-9);
        prop_assert_eq!(arg, nv * M + nu);
    }

    #[test]
    fn blob_peak_equals_mu_at_pixel_centres(u in 0usize..M, v in 0usize..M, mu in 0.0f64..5.0) {
        let kp = Keypoint::new(pixel_center(u, M), pixel_center(v, M), mu);
        let blob = render_blobs(&KeypointSet::new(vec![kp]), (M, M), 1.5).unwrap();
        prop_assert!((blob[v * M + u] - mu).abs() <= 1e-12 * mu.max(1.0));
        prop_assert!(blob.iter().all(|&b| b <= blob[v * M + u] + 1e-15));
    }

    #[test]
    fn render_then_expectation_round_trips(x in -1.0f64..1.0, y in -1.0f64..1.0, mu in 0.1f64..5.0) {
        // Keep at least two blob widths from the border.
        let margin = 2.0 * 1.5;
        let (px, py) = (to_pixel_units(x, M), to_pixel_units(y, M));
        prop_assume!(px >= margin - 0.5 && px <= M as f64 - 0.5 - margin && py >= margin - 0.5 && py <= M as f64 - 0.5 - margin);
        let blob = render_blobs(&KeypointSet::new(vec![Keypoint::new(x, y, mu)]), (M, M), 1.5).unwrap();
        let (rx, ry, _) = keypoint_from_map(&blob, M, M);
        let half_pixel = 1.0 / M as f64;
        prop_assert!((rx - x).abs() < half_pixel && (ry - y).abs() < half_pixel, "({}, {}) vs ({}, {})", rx, ry, x, y);
    }
}
