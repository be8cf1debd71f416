//! Acceptance report: one PASS/FAIL line per primary criterion.
//!
//! End-to-end criteria read the artifacts written by `scripts/e2e.sh`
//! (`<root>/<variant>/seed<N>/{train,eval}`), taken from `KPDYN_E2E_DIR` or
//! `results/e2e` at the workspace root. Exits non-zero if a gated criterion
//! fails.

#![allow(clippy::needless_range_loop)]

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kpdyn_core::dynamics::{draw_noise, UnrollBatch};
use kpdyn_core::nn::{Mat, Parameterized};
use kpdyn_core::objectives::{best_of_many_nll, gaussian_nll, image_loss, kl_diag_gaussian, separation_loss, sparsity_loss};
use kpdyn_core::synthdata::{generate_bouncing_dots, SceneConfig, SplitSizes};
use kpdyn_core::training::{kl_anneal_at, lr_at, scheduled_sampling_prob_at, Phase};
use kpdyn_core::vision::{keypoint_from_map, keypoint_from_map_backward, normalize_map, pixel_center, render_blobs, to_pixel_units};
use kpdyn_core::{DynamicsConfig, GaussianBelief, HyperParams, Keypoint, KeypointSet, RnnState, Trainer, VideoSequence, Vrnn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use common::{data_config, kpdyn, read_tree, tiny_hyper, train_config};

const SEEDS: [u64; 3] = [0, 1, 2];
const FD_EPS: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error for near-zero gradients.
const FD_FLOOR: f64 = 1e-6;
const EQUATION_BUDGET_SECS: f64 = 120.0;
const E2E_BUDGET_SECS: f64 = 7200.0;

type Check = Result<String, String>;
type SubCheck<'a> = (&'a str, &'a dyn Fn(&mut ChaCha8Rng) -> Result<(), String>);

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

// Equation-level suite.

fn detection_checks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let m = 16;
    for _ in 0..50 {
        let raw: Vec<f64> = (0..m * m).map(|_| rng.gen_range(0.0..3.0)).collect();
        let sum: f64 = normalize_map(&raw).iter().sum();
        ensure((sum - 1.0).abs() <= 1e-5, || format!("normalized map sums to {sum}"))?;
        let (x, y, mu) = keypoint_from_map(&raw, m, m);
        let (lo, hi) = (pixel_center(0, m), pixel_center(m - 1, m));
        ensure((lo..=hi).contains(&x) && (lo..=hi).contains(&y), || format!("coordinates ({x}, {y}) outside the pixel-centre hull"))?;
        let c = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        let (xs, ys, ms) = keypoint_from_map(&scaled, m, m);
        ensure((xs - x).abs() < 1e-9 && (ys - y).abs() < 1e-9, || format!("coordinates change under channel scaling by {:e}", (xs - x).abs().max((ys - y).abs())))?;
        ensure((ms - c * mu).abs() <= 1e-12 * ms.abs().max(1.0), || format!("mu not linear: {ms} vs {}", c * mu))?;
    }
    let (x, y, _) = keypoint_from_map(&vec![0.5f64; m * m], m, m);
    ensure(x.abs() < 1e-12 && y.abs() < 1e-12, || "uniform map is not centred".into())?;
    Ok(())
}

fn blob_checks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = 15;
    let blob = render_blobs(&KeypointSet::new(vec![Keypoint::new(0.0, 0.0, 1.0)]), (n, n), 1.5).map_err(|e| e.to_string())?;
    ensure(blob[7 * n + 7] == 1.0, || format!("centre value {}", blob[7 * n + 7]))?;
    ensure((blob[7 * n + 8] - (-1.0f64 / 4.5).exp()).abs() < 1e-15, || format!("neighbour value {}", blob[7 * n + 8]))?;
    let m = 16;
    for _ in 0..100 {
        let (u, v, mu) = (rng.gen_range(0..m), rng.gen_range(0..m), rng.gen_range(0.0..5.0));
        let b = render_blobs(&KeypointSet::new(vec![Keypoint::new(pixel_center(u, m), pixel_center(v, m), mu)]), (m, m), 1.5).map_err(|e| e.to_string())?;
        ensure((b[v * m + u] - mu).abs() <= 1e-12 * mu.max(1.0), || format!("peak {} vs mu {mu}", b[v * m + u]))?;
        ensure(b.iter().all(|&x| x <= b[v * m + u] + 1e-15), || "peak is not the maximum".into())?;
    }
    let zero = render_blobs(&KeypointSet::new(vec![Keypoint::new(0.2, 0.1, 0.0)]), (m, m), 1.5).map_err(|e| e.to_string())?;
    ensure(zero.iter().all(|&v| v == 0.0), || "mu = 0 blob is not empty".into())?;
    // Round trip, keeping two blob widths away from the border.
    let mut trials = 0;
    while trials < 200 {
        let (x, y, mu) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..5.0));
        let (px, py) = (to_pixel_units(x, m), to_pixel_units(y, m));
        let (lo, hi) = (3.0 - 0.5, m as f64 - 3.5);
        if !(lo..=hi).contains(&px) || !(lo..=hi).contains(&py) {
            continue;
        }
        trials += 1;
        let b = render_blobs(&KeypointSet::new(vec![Keypoint::new(x, y, mu)]), (m, m), 1.5).map_err(|e| e.to_string())?;
        let (rx, ry, _) = keypoint_from_map(&b, m, m);
        let half = 1.0 / m as f64;
        ensure((rx - x).abs() < half && (ry - y).abs() < half, || format!("round trip ({x}, {y}) -> ({rx}, {ry})"))?;
    }
    Ok(())
}

fn loss_checks() -> Result<(), String> {
    let k = 6;
    let same = vec![vec![[0.1, 0.2]; k]; 8];
    ensure((separation_loss(&same, 0.02) - (k * k) as f64).abs() < 1e-12, || "coincident keypoints do not give K^2".into())?;
    let single: Vec<Vec<[f64; 2]>> = (0..8).map(|t| vec![[0.05 * t as f64, 0.0]]).collect();
    ensure(separation_loss(&single, 0.02) == 1.0, || "single keypoint does not give 1".into())?;
    let apart: Vec<Vec<[f64; 2]>> = (0..8).map(|t| vec![[0.05 * t as f64, 0.1], [0.05 * t as f64 - 0.7, 0.6]]).collect();
    ensure((separation_loss(&apart, 0.02) - 4.0).abs() < 1e-12, || "distant pair does not give 4".into())?;
    ensure(sparsity_loss(&[0.5, 0.25, 0.0]) == 0.75, || "sparsity closed form".into())?;
    let a = VideoSequence::new(2, 4, 4, 3, (0..96).map(|i| (i % 48) as f32 / 64.0).collect()).map_err(|e| e.to_string())?;
    let b = VideoSequence::new(2, 4, 4, 3, a.data.iter().map(|v| v + 0.25).collect()).map_err(|e| e.to_string())?;
    ensure(image_loss(&a, &a).map_err(|e| e.to_string())? == 0.0, || "L2 of identical videos".into())?;
    ensure(image_loss(&a, &b).map_err(|e| e.to_string())? == 96.0 * 0.0625, || "L2 of offset videos".into())?;
    Ok(())
}

fn kl_checks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let m = vec![0.3, -1.2, 2.0];
    let q = GaussianBelief { mean: m.clone(), stddev: vec![1.0; 3] };
    let p = GaussianBelief { mean: vec![0.0; 3], stddev: vec![1.0; 3] };
    ensure(kl_diag_gaussian(&q, &q).map_err(|e| e.to_string())? == 0.0, || "KL(q || q) != 0".into())?;
    let expected: f64 = m.iter().map(|v| v * v / 2.0).sum();
    ensure((kl_diag_gaussian(&q, &p).map_err(|e| e.to_string())? - expected).abs() < 1e-12, || "KL against the unit Gaussian".into())?;
    let n = 1_000_000;
    for pair in 0..20 {
        let belief = |rng: &mut ChaCha8Rng| GaussianBelief { mean: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), stddev: (0..3).map(|_| rng.gen_range(0.3..2.0)).collect() };
        let (q, p) = (belief(rng), belief(rng));
        let log_density = |b: &GaussianBelief, z: &[f64]| -> f64 { z.iter().zip(&b.mean).zip(&b.stddev).map(|((z, m), s)| -0.5 * ((z - m) / s).powi(2) - s.ln()).sum() };
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut z = [0.0; 3];
        for _ in 0..n {
            for j in 0..3 {
                let e: f64 = StandardNormal.sample(rng);
                z[j] = q.mean[j] + q.stddev[j] * e;
            }
            let v = log_density(&q, &z) - log_density(&p, &z);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        let kl = kl_diag_gaussian(&q, &p).map_err(|e| e.to_string())?;
        ensure((kl - mean).abs() <= 3.0 * se, || format!("pair {pair}: closed form {kl} vs Monte Carlo {mean} (se {se})"))?;
    }
    Ok(())
}

fn best_of_many_checks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let cfg = DynamicsConfig { num_keypoints: 2, latent_size: 3, prior_net_size: 4, posterior_net_size: 4, decoder_net_size: 6, rnn_units: 5, action_size: 0 };
    let model = Vrnn::new(cfg, rng).map_err(|e| e.to_string())?;
    let h = RnnState { hidden: (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect() };
    let belief = GaussianBelief { mean: vec![0.1, -0.2, 0.3], stddev: vec![0.8, 1.2, 0.5] };
    let target = vec![0.1, 0.2, 0.5, -0.3, 0.4, 1.0];
    let one = best_of_many_nll(&model, &target, &belief, &h, 1, 3).map_err(|e| e.to_string())?;
    let decoded = model.decode_step(&one.chosen_z, &h).map_err(|e| e.to_string())?;
    ensure(one.nll == gaussian_nll(&target, &decoded), || "S = 1 differs from the plain NLL".into())?;
    for seed in 0..20 {
        let many = best_of_many_nll(&model, &target, &belief, &h, 50, seed).map_err(|e| e.to_string())?;
        let mean = many.sample_nll.iter().sum::<f64>() / many.sample_nll.len() as f64;
        let min = many.sample_nll.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(many.nll == min && min <= mean, || format!("best {} min {min} mean {mean}", many.nll))?;
    }
    Ok(())
}

fn schedule_checks() -> Result<(), String> {
    let hp = HyperParams::full_preset();
    let anchors = [
        (lr_at(&hp, 0), 1e-3),
        (lr_at(&hp, 30_000), 5e-4),
        (lr_at(&hp, 90_000), 1.25e-4),
        (kl_anneal_at(&hp, 0), 0.0),
        (kl_anneal_at(&hp, 12_500), 0.5),
        (kl_anneal_at(&hp, 25_000), 1.0),
        (scheduled_sampling_prob_at(&hp, 0, Phase::Observed), 0.0),
        (scheduled_sampling_prob_at(&hp, 100_000, Phase::Observed), hp.ss_final_observed),
        (scheduled_sampling_prob_at(&hp, 100_000, Phase::Predicted), hp.ss_final_predicted),
        (scheduled_sampling_prob_at(&hp, 50_000, Phase::Predicted), hp.ss_final_predicted / 2.0),
    ];
    for (i, (got, want)) in anchors.iter().enumerate() {
        ensure(got == want, || format!("anchor {i}: {got} != {want}"))?;
    }
    Ok(())
}

fn equation_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let parts: [SubCheck; 6] = [
        ("detection", &detection_checks),
        ("blobs", &blob_checks),
        ("losses", &|_| loss_checks()),
        ("kl", &kl_checks),
        ("best-of-many", &best_of_many_checks),
        ("schedules", &|_| schedule_checks()),
    ];
    for (name, f) in parts {
        f(&mut rng).map_err(|e| format!("{name}: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < EQUATION_BUDGET_SECS, || format!("took {secs:.1} s"))?;
    Ok(format!("all checks hold, {secs:.1} s"))
}

// Gradient suite.

fn detection_gradients() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 12;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let raw: Vec<f64> = (0..m * m).map(|_| rng.gen_range(0.05..2.0)).collect();
        let (gx, gy, gm) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let f = |r: &[f64]| {
            let (x, y, mu) = keypoint_from_map(r, m, m);
            gx * x + gy * y + gm * mu
        };
        let analytic = keypoint_from_map_backward(&raw, m, m, gx, gy, gm);
        for i in 0..raw.len() {
            let (mut p, mut q) = (raw.clone(), raw.clone());
            p[i] += FD_EPS;
            q[i] -= FD_EPS;
            worst = worst.max(rel_err(analytic[i], (f(&p) - f(&q)) / (2.0 * FD_EPS)));
        }
    }
    Ok(worst)
}

fn elbo_gradients() -> Result<(f64, usize), String> {
    let cfg = DynamicsConfig { num_keypoints: 2, latent_size: 3, prior_net_size: 4, posterior_net_size: 5, decoder_net_size: 6, rnn_units: 4, action_size: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Vrnn::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    // Zero biases put every ReLU exactly on its kink at h = 0.
    model.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)));
    let rows = 2;
    // Two observed steps so the recurrence parameters take part.
    let targets: Vec<Mat> = (0..2).map(|_| Mat::from_vec(rows, 6, (0..rows * 6).map(|_| rng.gen_range(-0.8..0.8)).collect())).collect();
    let noise = draw_noise(&mut rng, 2, rows, 3);
    let feed = vec![vec![false; rows]; 2];
    let batch = UnrollBatch { targets: &targets, actions: None, observed_steps: 2, samples: 1, noise: &noise, feed_decoded: &feed, kl_weight: 1.0 };
    let weights = vec![1.0 / rows as f64; rows];
    let result = model.unroll(&batch).map_err(|e| e.to_string())?;
    model.zero_grad();
    model.unroll_backward(&batch, &result, &weights);
    let mut analytic = Vec::new();
    model.visit(&mut |p| analytic.extend_from_slice(&p.grad));
    let objective = |m: &Vrnn| m.unroll(&batch).map(|r| r.objective(1.0, &weights));
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            let mut offset = 0;
            m.visit_mut(&mut |p| {
                if (offset..offset + p.len()).contains(&i) {
                    p.value[i - offset] += delta;
                }
                offset += p.len();
            });
            objective(&m)
        };
        let fd = (shifted(FD_EPS).map_err(|e| e.to_string())? - shifted(-FD_EPS).map_err(|e| e.to_string())?) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok((worst, analytic.len()))
}

fn stop_gradient_audit() -> Result<(), String> {
    let scene = SceneConfig { num_objects: 2, object_radius: 1.5, image_size: 16, sequence_length: 6, seed: 5, ..SceneConfig::default() };
    let data = generate_bouncing_dots(&scene, SplitSizes { train: 4, test: 0 }).map_err(|e| e.to_string())?;
    let hp = tiny_hyper();
    let mut trainer = Trainer::new(hp, &data).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        trainer.train_step().map_err(|e| e.to_string())?;
    }
    let vision_grads = |t: &Trainer| {
        let mut g = Vec::new();
        t.model.vision.visit(&mut |p| g.extend_from_slice(&p.grad));
        g
    };
    trainer.compute_gradients(true).map_err(|e| e.to_string())?;
    let with = vision_grads(&trainer);
    let mut dynamics_norm = 0.0;
    trainer.model.dynamics.visit(&mut |p| dynamics_norm += p.grad.iter().map(|g| g * g).sum::<f64>());
    trainer.compute_gradients(false).map_err(|e| e.to_string())?;
    let without = vision_grads(&trainer);
    ensure(dynamics_norm > 0.0, || "dynamics terms produced no gradient".into())?;
    let diff = with.iter().zip(&without).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(diff == 0.0, || format!("detector gradient changes by up to {diff} when the dynamics loss is included"))
}

fn gradient_suite() -> Check {
    let det = detection_gradients()?;
    let (elbo, n) = elbo_gradients()?;
    ensure(det < FD_REL_TOL, || format!("detection gradient relative error {det:.2e}"))?;
    ensure(elbo < FD_REL_TOL, || format!("ELBO gradient relative error {elbo:.2e}"))?;
    stop_gradient_audit()?;
    Ok(format!("max relative error: detection {det:.2e}, ELBO over {n} dynamics parameters {elbo:.2e}; detector gradient unchanged by dynamics terms"))
}

// End-to-end artifacts.

fn e2e_root() -> PathBuf {
    std::env::var_os("KPDYN_E2E_DIR").map(PathBuf::from).unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root").join("results/e2e"))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("summary field {key} missing"))
}

/// `(step, total)` rows of a metrics log.
fn totals(path: &Path) -> Result<Vec<(u64, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty metrics log")?.split(',').collect();
    let col = header.iter().position(|h| *h == "total").ok_or("metrics log has no total column")?;
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Ok((f[0].parse().map_err(|_| "bad step")?, f[col].parse().map_err(|_| "bad total")?))
        })
        .collect()
}

struct SeedRun {
    seed: u64,
    summary: Value,
    totals: Vec<(u64, f64)>,
    train_seconds: Option<f64>,
}

fn load_runs(variant: &str) -> Result<Vec<SeedRun>, String> {
    let root = e2e_root();
    SEEDS
        .iter()
        .map(|&seed| {
            let dir = root.join(variant).join(format!("seed{seed}"));
            let train_seconds = read_json(&dir.join("train/timing.json")).ok().and_then(|t| t["train_seconds"].as_f64());
            Ok(SeedRun { seed, summary: read_json(&dir.join("eval/summary.json"))?, totals: totals(&dir.join("train/metrics.csv"))?, train_seconds })
        })
        .collect()
}

fn object_radius() -> Result<f64, String> {
    let run = read_json(&e2e_root().join("data/run.json"))?;
    run["config"]["scene"]["object_radius"].as_f64().ok_or_else(|| "data/run.json has no object_radius".into())
}

fn e2e_seed(run: &SeedRun, radius: f64) -> Result<String, String> {
    let s = &run.summary;
    let first = run.totals.iter().find(|(step, _)| *step == 100).ok_or("no step-100 row")?.1;
    let (last_step, last) = *run.totals.last().ok_or("empty metrics log")?;
    let drop = 1.0 - last / first;
    let observed = num(s, "observed_error_px")?;
    let px = num(s, "pixels_per_unit")?;
    let best_h = num(s, "final_step_error_best")? * px;
    let static_h = num(s, "final_step_error_static")? * px;
    let (best, first_sample) = (num(s, "predicted_error_best")?, num(s, "predicted_error_first_sample")?);
    let samples = s["num_samples"].as_u64().unwrap_or(0);
    let mut failures = Vec::new();
    if last_step < 20_000 {
        failures.push(format!("trained only {last_step} steps"));
    }
    if samples != 50 {
        failures.push(format!("evaluated with {samples} samples"));
    }
    if drop < 0.5 {
        failures.push(format!("loss drop {:.1}% < 50%", 100.0 * drop));
    }
    if observed >= radius {
        failures.push(format!("observed probe error {observed:.2} px >= radius {radius} px"));
    }
    if best_h >= static_h {
        failures.push(format!("best-of-50 {best_h:.2} px does not beat static {static_h:.2} px at the horizon"));
    }
    if best > first_sample {
        failures.push(format!("best-of-50 {best} > best-of-1 {first_sample}"));
    }
    let detail = format!(
        "loss {first:.1} -> {last:.1} ({:.1}% drop), observed {observed:.2} px, horizon best-of-50 {best_h:.2} px vs static {static_h:.2} px, best-of-50 {:.2} vs best-of-1 {:.2} px",
        100.0 * drop,
        best * px,
        first_sample * px
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail} [{}]", failures.join("; ")))
    }
}

fn e2e_suite() -> Vec<(String, Check)> {
    let runs = match load_runs("main").and_then(|r| object_radius().map(|rad| (r, rad))) {
        Ok(r) => r,
        Err(e) => return vec![("desk-scale end-to-end".into(), Err(format!("artifacts unavailable under {}: {e}", e2e_root().display())))],
    };
    let (runs, radius) = runs;
    let mut out: Vec<(String, Check)> = runs.iter().map(|r| (format!("desk-scale end-to-end, seed {}", r.seed), e2e_seed(r, radius))).collect();
    let times: Option<Vec<f64>> = runs.iter().map(|r| r.train_seconds).collect();
    let budget = match times {
        None => Err("training times not recorded".to_string()),
        Some(t) => {
            let total: f64 = t.iter().sum();
            let detail = format!("training wall time {:.0} min for {} seeds", total / 60.0, t.len());
            if total <= E2E_BUDGET_SECS {
                Ok(detail)
            } else {
                Err(format!("{detail} exceeds {:.0} min", E2E_BUDGET_SECS / 60.0))
            }
        }
    };
    out.push(("desk-scale end-to-end time budget".into(), budget));
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)
}

fn ablations() -> Vec<(String, String)> {
    let px_field = |runs: &[SeedRun], key: &str| -> Result<Vec<f64>, String> { runs.iter().map(|r| Ok(num(&r.summary, key)? * num(&r.summary, "pixels_per_unit")?)).collect() };
    let bom = (|| -> Result<String, String> {
        let (with, without) = (px_field(&load_runs("main")?, "predicted_error_best")?, px_field(&load_runs("no_bom")?, "predicted_error_best")?);
        let (a, b) = (median(with), median(without));
        Ok(format!("median best-of-50 error {a:.2} px with S=50 training vs {b:.2} px with S=1 ({})", if a < b { "lower with best-of-many" } else { "NOT lower with best-of-many" }))
    })();
    let structure = (|| -> Result<String, String> {
        let (with, without) = (px_field(&load_runs("main")?, "observed_error")?, px_field(&load_runs("no_struct")?, "observed_error")?);
        Ok(format!(
            "across-seed variance of observed probe error {:.3} px^2 with separation+sparsity ({:?}) vs {:.3} px^2 without ({:?})",
            variance(&with),
            with.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            variance(&without),
            without.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ))
    })();
    [("ablation: best-of-many training", bom), ("ablation: structural losses", structure)]
        .into_iter()
        .map(|(n, r)| (n.to_string(), r.unwrap_or_else(|e| format!("unavailable: {e}"))))
        .collect()
}

// Determinism through the command line.

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let (dcfg, tcfg) = (data_config(d), train_config(d));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    for tag in ["a", "b"] {
        let (data, train, eval) = (d.join(format!("data_{tag}")), d.join(format!("train_{tag}")), d.join(format!("eval_{tag}")));
        let cmds: [Vec<String>; 3] = [
            vec!["generate".into(), "--config".into(), s(&dcfg), "--out".into(), s(&data)],
            vec!["train".into(), "--config".into(), s(&tcfg), "--data".into(), s(&data), "--out".into(), s(&train), "--quiet".into()],
            vec!["eval".into(), "--ckpt".into(), s(&train.join("final.ckpt")), "--data".into(), s(&data), "--out".into(), s(&eval), "--samples".into(), "5".into()],
        ];
        for c in &cmds {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            ensure(kpdyn(&args) == 0, || format!("`kpdyn {}` failed", c.join(" ")))?;
        }
    }
    for what in ["data", "train", "eval"] {
        ensure(read_tree(&d.join(format!("{what}_a"))) == read_tree(&d.join(format!("{what}_b"))), || format!("{what} outputs differ between identical runs"))?;
    }
    let hash = kpdyn_cli::commands::dataset_hash(&d.join("data_a")).map_err(|e| e.to_string())?;
    Ok(format!("generate, train and eval outputs byte-identical across repeats (dataset sha256 {}…)", &hash[..12]))
}

fn main() {
    let mut gated: Vec<(String, Check)> = vec![("equation-level suite".into(), equation_suite()), ("gradient suite".into(), gradient_suite())];
    gated.extend(e2e_suite());
    gated.push(("determinism".into(), determinism()));
    let mut failed = 0;
    for (name, result) in &gated {
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    for (name, detail) in ablations() {
        println!("REPORT {name}: {detail}");
    }
    println!("{} of {} gated criteria passed", gated.len() - failed, gated.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
