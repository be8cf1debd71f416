use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use kpdyn_core::evaluation::{
    diversity_stats, fit_probe_on, pixel_metrics, pixels_per_unit, prepare_sequences, trajectory_error, BestOf, TrajectoryOptions, TrajectoryReport,
};
use kpdyn_core::manipulation::{apply_edits, counterfactual_rollout, CounterfactualOptions, KeypointEdit};
use kpdyn_core::synthdata::{self, ActionSettings, Dataset, SceneConfig, SplitSizes};
use kpdyn_core::training::{file_sha256, Checkpoint, CHECKPOINT_VERSION};
use kpdyn_core::{HyperParams, KeypointDynamicsModel, KeypointSet, ObservedFeed, Trainer, VideoSequence};

use crate::{images, plot, service, CliError};

#[derive(Debug, Parser)]
#[command(name = "kpdyn", version, about = "Keypoint discovery and stochastic keypoint dynamics for video prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bouncing-dot dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Trajectory-error evaluation with a linear probe.
    Eval(EvalArgs),
    /// Sample future keypoints and frames for one sequence.
    Rollout(RolloutArgs),
    /// Roll out from edited observed keypoints.
    Manipulate(ManipulateArgs),
    /// Serve the inference API (and optional static files).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    /// Feed decoded keypoints into the recurrence on observed steps.
    Decoded,
    /// Feed detected keypoints (teacher forcing).
    Detected,
}

impl From<FeedMode> for ObservedFeed {
    fn from(m: FeedMode) -> Self {
        match m {
            FeedMode::Decoded => ObservedFeed::Decoded,
            FeedMode::Detected => ObservedFeed::Detected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOfArg {
    Sequence,
    Object,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON file with `scene`, `train`, `test` and optional `actions`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scene seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Hyperparameter JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named configuration: `desk` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Do not echo metrics rows.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate at most this many test sequences.
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// Training sequences used to fit the probe.
    #[arg(long, default_value_t = 300)]
    pub probe_sequences: usize,
    #[arg(long, value_enum, default_value_t = BestOfArg::Sequence)]
    pub best_of: BestOfArg,
    #[arg(long, value_enum, default_value_t = FeedMode::Decoded)]
    pub mode: FeedMode,
    /// Sequences used for pixel metrics and diversity statistics.
    #[arg(long, default_value_t = 10)]
    pub pixel_sequences: usize,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seq: usize,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the trained number of predicted steps.
    #[arg(long)]
    pub predict_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = FeedMode::Decoded)]
    pub mode: FeedMode,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset the edited sequence comes from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub edits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip decoding frames.
    #[arg(long)]
    pub no_frames: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Dataset exposed under /api/sequences.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory served under `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Seed recorded in run metadata; rollouts take their seed per request.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Dataset generation config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default)]
    pub scene: SceneConfig,
    pub train: usize,
    pub test: usize,
    #[serde(default)]
    pub actions: Option<ActionSettings>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), train: 100, test: 20, actions: None }
    }
}

/// `edits.json` for the manipulate command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditsFile {
    pub sequence: usize,
    pub edits: Vec<KeypointEdit>,
    pub samples: usize,
    pub predict_steps: usize,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rollout(a) => rollout(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Serve(a) => serve(a),
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(runtime(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(runtime(&path.display().to_string()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(runtime(&path.display().to_string()))
}

/// SHA-256 of a dataset manifest, identifying the dataset independent of its location.
pub fn dataset_hash(dir: &Path) -> Result<String, CliError> {
    Ok(file_sha256(dir.join("manifest.json"))?)
}

/// Write `run.json`: command, resolved configuration, seed, input hashes and versions.
pub fn write_run_json(out: &Path, command: &str, config: Value, seed: u64, checkpoint_sha256: Option<&str>, dataset_sha256: Option<&str>) -> Result<(), CliError> {
    let info = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoint_sha256": checkpoint_sha256,
        "dataset_manifest_sha256": dataset_sha256,
        "versions": {
            "kpdyn": env!("CARGO_PKG_VERSION"),
            "dataset_format": synthdata::FORMAT_VERSION,
            "checkpoint_format": CHECKPOINT_VERSION,
        },
    });
    let text = serde_json::to_string_pretty(&info).map_err(runtime("run.json"))?;
    write_file(&out.join("run.json"), text + "\n")
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg: GenerateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.scene.seed = s;
    }
    let splits = SplitSizes { train: cfg.train, test: cfg.test };
    let data = match &cfg.actions {
        Some(act) => synthdata::generate_action_conditioned(&cfg.scene, act, splits)?,
        None => synthdata::generate_bouncing_dots(&cfg.scene, splits)?,
    };
    synthdata::write_dataset(&data, &a.out)?;
    let hash = dataset_hash(&a.out)?;
    write_run_json(&a.out, "generate", serde_json::to_value(&cfg).map_err(runtime("config"))?, cfg.scene.seed, None, Some(&hash))?;
    eprintln!("wrote {} sequences to {}", data.len(), a.out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(synthdata::read_dataset(path)?)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let data = load_dataset(&a.data)?;
    let resumed = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let mut hp = match (&resumed, &a.config, &a.preset) {
        (Some(c), _, _) => c.model.hyper.clone(),
        (None, Some(p), _) => HyperParams::load(p)?,
        (None, None, Some(name)) => HyperParams::preset(name).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None, None) => HyperParams::default(),
    };
    if resumed.is_some() && a.seed.is_some_and(|s| s != hp.seed) {
        return Err(CliError::Usage("--seed cannot change the seed of a resumed run".into()));
    }
    if let Some(s) = a.seed {
        hp.seed = s;
    }
    if let Some(n) = a.steps {
        hp.total_steps = n;
    }
    hp.validate()?;
    let mut trainer = match resumed {
        Some(mut c) => {
            c.model.hyper.total_steps = hp.total_steps;
            Trainer::from_checkpoint(c, &data)?
        }
        None => Trainer::new(hp.clone(), &data)?,
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), serde_json::to_string_pretty(&hp).map_err(runtime("config"))? + "\n")?;
    let quiet = a.quiet;
    let last = trainer.run(&a.out, |row| {
        if !quiet {
            eprintln!("{row}");
        }
    })?;
    let hash = file_sha256(&last)?;
    write_run_json(&a.out, "train", serde_json::to_value(&hp).map_err(runtime("config"))?, hp.seed, Some(&hash), Some(&dataset_hash(&a.data)?))?;
    eprintln!("final checkpoint {} (sha256 {hash})", last.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(KeypointDynamicsModel, String), CliError> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.model, file_sha256(path)?))
}

fn curve_csv(report: &TrajectoryReport, px: f64) -> String {
    let mut s = String::from("step,phase,best,first_sample,static_baseline,best_px,first_sample_px,static_baseline_px\n");
    for t in 0..report.best.len() {
        let phase = if t < report.observed_steps { "observed" } else { "predicted" };
        let (b, f, st) = (report.best[t], report.first_sample[t], report.static_baseline[t]);
        s.push_str(&format!("{},{phase},{b},{f},{st},{},{},{}\n", t + 1, b * px, f * px, st * px));
    }
    s
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let (model, hash) = load_model(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let hp = model.hyper.clone();
    let len = hp.window_len();
    let test: Vec<usize> = data.test.iter().copied().take(a.max_sequences.unwrap_or(usize::MAX)).collect();
    let fit: Vec<usize> = data.train.iter().copied().take(a.probe_sequences).collect();
    if test.is_empty() || fit.is_empty() {
        return Err(CliError::Runtime("dataset needs both train (probe) and test sequences".into()));
    }
    let fit_set: HashSet<usize> = fit.iter().copied().collect();
    if test.iter().any(|i| fit_set.contains(i)) {
        return Err(CliError::Runtime("probe and evaluation splits overlap".into()));
    }
    let probe_seqs = prepare_sequences(&model, &data, &fit, len)?;
    let probe = fit_probe_on(&probe_seqs)?;
    let seqs = prepare_sequences(&model, &data, &test, len)?;
    let opts = TrajectoryOptions {
        observed_steps: hp.observed_steps,
        predict_steps: hp.predicted_steps,
        num_samples: a.samples,
        seed: a.seed,
        best_of: match a.best_of {
            BestOfArg::Sequence => BestOf::Sequence,
            BestOfArg::Object => BestOf::Object,
        },
        feed: a.mode.into(),
    };
    let report = trajectory_error(&model, &probe, &seqs, &opts)?;
    let px = pixels_per_unit(hp.image_size);

    // Pixel metrics and diversity on a few sequences.
    let mut psnr = vec![0.0; len];
    let mut ssim = vec![0.0; len];
    let mut diversity = Vec::new();
    let n_pix = a.pixel_sequences.min(seqs.len());
    for s in seqs.iter().take(n_pix) {
        let video = data.video(s.id)?.window(0, len);
        let observed: Vec<KeypointSet> = s.keypoints[..hp.observed_steps].iter().map(|v| KeypointSet::from_vector(v)).collect::<Result<_, _>>()?;
        let mut copts = CounterfactualOptions::new(hp.predicted_steps, a.samples, a.seed ^ s.id as u64);
        copts.feed = a.mode.into();
        copts.actions = s.actions.clone();
        let res = counterfactual_rollout(&model, &observed, &copts, Some((&video, &observed[0])))?;
        let recon = model.render(&video, &observed[0], &observed)?;
        let mut frames: Vec<f32> = recon.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
        frames.extend(res.frames.as_ref().expect("frames requested")[0].iter().flatten());
        let pred = VideoSequence::new(len, hp.image_size, hp.image_size, hp.channels, frames)?;
        for (t, m) in pixel_metrics(&video, &pred)?.iter().enumerate() {
            psnr[t] += m.psnr / n_pix as f64;
            ssim[t] += m.ssim / n_pix as f64;
        }
        let samples: Vec<Vec<Vec<f64>>> = res.keypoints.iter().map(|traj| traj[hp.observed_steps..].iter().map(|k| probe.predict(&k.to_vector())).collect()).collect();
        diversity.push(diversity_stats(&samples, &s.truth[hp.observed_steps..len])?);
    }
    let mean_div = |f: fn(&kpdyn_core::evaluation::DiversityStats) -> f64| diversity.iter().map(f).sum::<f64>() / diversity.len().max(1) as f64;

    create_dir(&a.out)?;
    write_file(&a.out.join("curves.csv"), curve_csv(&report, px))?;
    write_file(&a.out.join("probe.json"), serde_json::to_string_pretty(&probe).map_err(runtime("probe"))?)?;
    let summary = json!({
        "num_test_sequences": seqs.len(),
        "num_probe_sequences": probe_seqs.len(),
        "num_samples": a.samples,
        "aggregation": report.aggregation,
        "best_of": a.best_of,
        "observed_feed": a.mode,
        "pixels_per_unit": px,
        "observed_error": report.observed_mean(),
        "observed_error_px": report.observed_mean() * px,
        "predicted_error_best": report.predicted_mean(&report.best),
        "predicted_error_first_sample": report.predicted_mean(&report.first_sample),
        "predicted_error_static": report.predicted_mean(&report.static_baseline),
        "final_step_error_best": report.best.last(),
        "final_step_error_static": report.static_baseline.last(),
        "final_step_error_first_sample": report.first_sample.last(),
        "psnr": psnr,
        "ssim": ssim,
        "pixel_sequences": n_pix,
        "diversity": { "closest": mean_div(|d| d.closest), "furthest": mean_div(|d| d.furthest), "spread": mean_div(|d| d.spread) },
        "report": report,
    });
    write_file(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(runtime("summary"))? + "\n")?;
    let px_curve = |v: &[f64]| v.iter().map(|x| x * px).collect::<Vec<f64>>();
    let (b, f, st) = (px_curve(&report.best), px_curve(&report.first_sample), px_curve(&report.static_baseline));
    let best_name = format!("best of {}", a.samples);
    let svg = plot::line_chart("Trajectory error", "error (pixels)", &[(best_name.as_str(), &b), ("first sample", &f), ("static baseline", &st)], Some(hp.observed_steps));
    write_file(&a.out.join("trajectory_error.svg"), svg)?;
    write_file(&a.out.join("pixel_metrics.svg"), plot::line_chart("Pixel metrics", "SSIM", &[("SSIM", &ssim)], Some(hp.observed_steps)))?;
    let config = json!({ "samples": a.samples, "max_sequences": a.max_sequences, "probe_sequences": a.probe_sequences, "best_of": a.best_of, "mode": a.mode, "pixel_sequences": a.pixel_sequences });
    write_run_json(&a.out, "eval", config, a.seed, Some(&hash), Some(&dataset_hash(&a.data)?))?;
    eprintln!(
        "observed error {:.3} px, predicted error best-of-{} {:.3} px, static {:.3} px",
        report.observed_mean() * px,
        a.samples,
        report.predicted_mean(&report.best) * px,
        report.predicted_mean(&report.static_baseline) * px
    );
    Ok(())
}

/// Detected keypoints of the observed frames of one dataset sequence.
pub fn observed_keypoints(model: &KeypointDynamicsModel, data: &Dataset, seq: usize) -> Result<(VideoSequence, Vec<KeypointSet>), CliError> {
    if seq >= data.len() {
        return Err(CliError::Usage(format!("sequence {seq} out of range (dataset has {})", data.len())));
    }
    let t = model.hyper.observed_steps;
    if data.frames < t {
        return Err(CliError::Runtime(format!("sequence has {} frames, model observes {t}", data.frames)));
    }
    let video = data.video(seq)?;
    let kps = model.detect(&video.window(0, t))?;
    Ok((video, kps))
}

/// Recorded actions of a sequence when the model is action-conditioned.
pub fn model_actions(model: &KeypointDynamicsModel, data: &Dataset, seq: usize) -> Option<Vec<Vec<f64>>> {
    data.sequences[seq].trajectory.actions.clone().filter(|_| model.hyper.action_size > 0)
}

fn keypoints_csv(samples: &[Vec<KeypointSet>]) -> String {
    let mut s = String::from("sample,step,keypoint,x,y,mu\n");
    for (i, traj) in samples.iter().enumerate() {
        for (t, set) in traj.iter().enumerate() {
            for (k, p) in set.points.iter().enumerate() {
                s.push_str(&format!("{i},{t},{k},{},{},{}\n", p.x, p.y, p.mu));
            }
        }
    }
    s
}

fn write_strips(out: &Path, model: &KeypointDynamicsModel, video: &VideoSequence, observed: &[KeypointSet], samples: &[Vec<KeypointSet>], frames: &[Vec<Vec<f32>>]) -> Result<(), CliError> {
    let s = model.hyper.image_size;
    let truth_len = video.frames.min(observed.len() + frames.first().map_or(0, |f| f.len()));
    let truth: Vec<Vec<u8>> = (0..truth_len)
        .map(|t| {
            let mut img = images::to_rgb(video.frame(t), video.channels);
            if t < observed.len() {
                let pts: Vec<[f64; 2]> = observed[t].points.iter().map(|p| [p.x, p.y]).collect();
                images::mark_keypoints(&mut img, s, s, &pts);
            }
            img
        })
        .collect();
    write_file(&out.join("truth.png"), images::encode_png(&images::strip(&truth, s, s), truth.len() * s, s)?)?;
    for (i, f) in frames.iter().enumerate() {
        let imgs: Vec<Vec<u8>> = f
            .iter()
            .enumerate()
            .map(|(j, fr)| {
                let mut img = images::to_rgb(fr, video.channels);
                let pts: Vec<[f64; 2]> = samples[i][observed.len() + j].points.iter().map(|p| [p.x, p.y]).collect();
                images::mark_keypoints(&mut img, s, s, &pts);
                img
            })
            .collect();
        write_file(&out.join(format!("sample_{i:03}.png")), images::encode_png(&images::strip(&imgs, s, s), imgs.len() * s, s)?)?;
    }
    Ok(())
}

fn rollout(a: RolloutArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let (model, hash) = load_model(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let (video, observed) = observed_keypoints(&model, &data, a.seq)?;
    let dt = a.predict_steps.unwrap_or(model.hyper.predicted_steps);
    let mut opts = CounterfactualOptions::new(dt, a.samples, a.seed);
    opts.feed = a.mode.into();
    opts.actions = model_actions(&model, &data, a.seq);
    let res = counterfactual_rollout(&model, &observed, &opts, Some((&video, &observed[0])))?;
    create_dir(&a.out)?;
    write_file(&a.out.join("keypoints.csv"), keypoints_csv(&res.keypoints))?;
    write_strips(&a.out, &model, &video, &observed, &res.keypoints, res.frames.as_deref().unwrap_or(&[]))?;
    let config = json!({ "sequence": a.seq, "samples": a.samples, "predict_steps": dt, "mode": a.mode });
    write_run_json(&a.out, "rollout", config, a.seed, Some(&hash), Some(&dataset_hash(&a.data)?))?;
    Ok(())
}

fn manipulate(a: ManipulateArgs) -> Result<(), CliError> {
    let request: EditsFile = read_json(&a.edits)?;
    if request.samples == 0 {
        return Err(CliError::Usage("edits file: samples must be at least 1".into()));
    }
    let (model, hash) = load_model(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let (video, observed) = observed_keypoints(&model, &data, request.sequence)?;
    let edited = apply_edits(&observed, &request.edits)?;
    let mut opts = CounterfactualOptions::new(request.predict_steps, request.samples, a.seed);
    opts.actions = model_actions(&model, &data, request.sequence);
    let reference = (!a.no_frames).then_some((&video, &observed[0]));
    let res = counterfactual_rollout(&model, &edited, &opts, reference)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("keypoints.csv"), keypoints_csv(&res.keypoints))?;
    if let Some(frames) = &res.frames {
        write_strips(&a.out, &model, &video, &edited, &res.keypoints, frames)?;
    }
    write_run_json(&a.out, "manipulate", serde_json::to_value(&request).map_err(runtime("edits"))?, a.seed, Some(&hash), Some(&dataset_hash(&a.data)?))?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let state = service::AppState::load(&a.ckpt, a.data.as_deref())?;
    let app = service::router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime("tokio"))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await.map_err(runtime("bind"))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(runtime("bind"))?);
        axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime("serve"))
    })
}
