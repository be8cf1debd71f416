//! HTTP inference API over a frozen checkpoint and an optional dataset.
//!
//! All handlers read shared immutable state; randomness comes only from the
//! per-request seed, so identical requests give identical bodies.

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::services::ServeDir;

use kpdyn_core::manipulation::{apply_edits, counterfactual_rollout, CounterfactualOptions, KeypointEdit};
use kpdyn_core::synthdata::{self, Dataset};
use kpdyn_core::training::{file_sha256, Checkpoint};
use kpdyn_core::{Error as CoreError, KeypointDynamicsModel, KeypointSet, ObservedFeed};

use crate::{images, CliError};

/// Upper bound on samples per rollout request.
pub const MAX_SAMPLES: u64 = 64;
/// Upper bound on predicted steps per rollout request.
pub const MAX_PREDICT_STEPS: u64 = 256;
/// Page size limit for sequence listings.
pub const MAX_PAGE: u64 = 1000;

pub struct AppState {
    pub model: KeypointDynamicsModel,
    pub checkpoint_sha256: String,
    pub dataset: Option<Dataset>,
}

impl AppState {
    pub fn load(ckpt: &Path, data: Option<&Path>) -> Result<Self, CliError> {
        let checkpoint_sha256 = file_sha256(ckpt)?;
        let model = Checkpoint::load(ckpt)?.model;
        let dataset = match data {
            Some(d) => {
                let ds = synthdata::read_dataset(d)?;
                if (ds.height, ds.width, ds.channels) != (model.hyper.image_size, model.hyper.image_size, model.hyper.channels) {
                    return Err(CliError::Runtime(format!(
                        "dataset frames are {}x{}x{}, model expects {}x{}x{}",
                        ds.height, ds.width, ds.channels, model.hyper.image_size, model.hyper.image_size, model.hyper.channels
                    )));
                }
                Some(ds)
            }
            None => None,
        };
        Ok(Self { model, checkpoint_sha256, dataset })
    }
}

type Shared = Arc<AppState>;

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/info", get(info))
        .route("/api/sequences", get(list_get).post(list_post))
        .route("/api/sequences/{id}", get(sequence))
        .route("/api/rollout", post(rollout))
        .with_state(Arc::new(state));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Error body: `{"error": message, "fields": {field: message}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub fields: Map<String, Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), fields: Map::new() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "fields": self.fields }))).into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        Self::internal(e)
    }
}

/// Collects field-level schema violations.
#[derive(Default)]
struct Fields {
    errors: Map<String, Value>,
}

impl Fields {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.errors.insert(field.into(), Value::String(message.into()));
    }

    fn uint(&mut self, obj: &Map<String, Value>, key: &str, default: Option<u64>, max: u64) -> Option<u64> {
        match obj.get(key) {
            None | Some(Value::Null) => {
                if default.is_none() {
                    self.push(key, "required");
                }
                default
            }
            Some(v) => match v.as_u64() {
                Some(n) if n <= max => Some(n),
                Some(_) => {
                    self.push(key, format!("must be at most {max}"));
                    None
                }
                None => {
                    self.push(key, "must be a non-negative integer");
                    None
                }
            },
        }
    }

    fn finish(self) -> Result<(), ApiError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ApiError { status: StatusCode::BAD_REQUEST, message: "invalid request".into(), fields: self.errors })
        }
    }
}

fn parse_object(body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, "request body must be a JSON object")),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}"))),
    }
}

fn check_unknown(obj: &Map<String, Value>, allowed: &[&str], fields: &mut Fields) {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            fields.push(k.clone(), "unknown field");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub num_keypoints: usize,
    pub observed_steps: usize,
    pub predicted_steps: usize,
    pub latent_size: usize,
    pub checkpoint_sha256: String,
    pub image_size: usize,
    pub channels: usize,
    pub action_size: usize,
    pub num_sequences: usize,
}

async fn info(State(s): State<Shared>) -> Json<InfoResponse> {
    let hp = &s.model.hyper;
    Json(InfoResponse {
        num_keypoints: hp.num_keypoints,
        observed_steps: hp.observed_steps,
        predicted_steps: hp.predicted_steps,
        latent_size: hp.latent_size,
        checkpoint_sha256: s.checkpoint_sha256.clone(),
        image_size: hp.image_size,
        channels: hp.channels,
        action_size: hp.action_size,
        num_sequences: s.dataset.as_ref().map_or(0, |d| d.len()),
    })
}

fn dataset(s: &AppState) -> Result<&Dataset, ApiError> {
    s.dataset.as_ref().ok_or_else(|| ApiError::not_found("no dataset loaded"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub id: usize,
    pub split: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<SequenceSummary>,
}

fn split_of(d: &Dataset, id: usize) -> &'static str {
    if d.test.contains(&id) {
        "test"
    } else if d.train.contains(&id) {
        "train"
    } else {
        "none"
    }
}

fn page(s: &AppState, obj: &Map<String, Value>) -> Result<SequencePage, ApiError> {
    let mut fields = Fields::default();
    check_unknown(obj, &["offset", "limit", "split"], &mut fields);
    let offset = fields.uint(obj, "offset", Some(0), u64::MAX);
    let limit = fields.uint(obj, "limit", Some(100), MAX_PAGE);
    let split = match obj.get("split") {
        None | Some(Value::Null) => None,
        Some(Value::String(x)) if x == "train" || x == "test" => Some(x.clone()),
        Some(_) => {
            fields.push("split", "must be \"train\" or \"test\"");
            None
        }
    };
    fields.finish()?;
    let d = dataset(s)?;
    let ids: Vec<usize> = match split.as_deref() {
        Some("train") => d.train.clone(),
        Some("test") => d.test.clone(),
        _ => (0..d.len()).collect(),
    };
    let (offset, limit) = (offset.unwrap_or(0) as usize, limit.unwrap_or(100) as usize);
    let items = ids.iter().skip(offset).take(limit).map(|&id| SequenceSummary { id, split: split_of(d, id).into(), frames: d.frames }).collect();
    Ok(SequencePage { total: ids.len(), offset, items })
}

async fn list_get(State(s): State<Shared>, Query(q): Query<Map<String, Value>>) -> Result<Json<SequencePage>, ApiError> {
    // Query values arrive as strings; numeric ones are re-read as numbers.
    let obj = q
        .into_iter()
        .map(|(k, v)| {
            let v = match &v {
                Value::String(x) => x.parse::<u64>().map(Value::from).unwrap_or(v),
                _ => v,
            };
            (k, v)
        })
        .collect();
    page(&s, &obj).map(Json)
}

async fn list_post(State(s): State<Shared>, body: Bytes) -> Result<Json<SequencePage>, ApiError> {
    let obj = if body.iter().all(|b| b.is_ascii_whitespace()) { Map::new() } else { parse_object(&body)? };
    page(&s, &obj).map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResponse {
    pub id: usize,
    pub split: String,
    pub width: usize,
    pub height: usize,
    /// One base64 PNG per frame.
    pub frames: Vec<String>,
    /// Detected keypoints per frame, `[x, y, μ]` per keypoint.
    pub keypoints: Vec<Vec<[f64; 3]>>,
    /// Ground-truth object centres per frame in normalized coordinates.
    pub truth: Option<Vec<Vec<[f64; 2]>>>,
    pub actions: Option<Vec<Vec<f64>>>,
}

fn triples(set: &KeypointSet) -> Vec<[f64; 3]> {
    set.points.iter().map(|p| [p.x, p.y, p.mu]).collect()
}

fn load_sequence(s: &AppState, id: usize) -> Result<SequenceResponse, ApiError> {
    let d = dataset(s)?;
    if id >= d.len() {
        return Err(ApiError::not_found(format!("sequence {id} not found")));
    }
    let video = d.video(id).map_err(ApiError::internal)?;
    let keypoints = s.model.detect(&video).map_err(ApiError::internal)?;
    let frames = (0..video.frames)
        .map(|t| images::base64_png(&images::to_rgb(video.frame(t), video.channels), video.width, video.height))
        .collect::<Result<_, _>>()?;
    let traj = &d.sequences[id].trajectory;
    Ok(SequenceResponse {
        id,
        split: split_of(d, id).into(),
        width: video.width,
        height: video.height,
        frames,
        keypoints: keypoints.iter().map(triples).collect(),
        truth: (!traj.coords.is_empty()).then(|| traj.coords.clone()),
        actions: traj.actions.clone(),
    })
}

async fn sequence(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SequenceResponse>, ApiError> {
    let id: usize = id.parse().map_err(|_| ApiError::not_found(format!("sequence {id:?} not found")))?;
    tokio::task::spawn_blocking(move || load_sequence(&s, id)).await.map_err(ApiError::internal)?.map(Json)
}

/// Validated `/api/rollout` body.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBody {
    pub sequence_id: usize,
    pub edits: Vec<KeypointEdit>,
    pub samples: usize,
    pub predict_steps: usize,
    pub seed: u64,
    pub decode_frames: bool,
    pub feed: ObservedFeed,
}

fn parse_edit(v: &Value, i: usize, fields: &mut Fields) -> Option<KeypointEdit> {
    let name = |f: &str| format!("edits[{i}].{f}");
    let Value::Object(o) = v else {
        fields.push(format!("edits[{i}]"), "must be an object");
        return None;
    };
    for k in o.keys() {
        if !["t", "k", "x", "y", "mu"].contains(&k.as_str()) {
            fields.push(name(k), "unknown field");
        }
    }
    let mut index = |f: &str| match o.get(f).map(|v| v.as_u64()) {
        Some(Some(n)) => Some(n as usize),
        Some(None) => {
            fields.push(name(f), "must be a non-negative integer");
            None
        }
        None => {
            fields.push(name(f), "required");
            None
        }
    };
    let (t, k) = (index("t"), index("k"));
    let mut number = |f: &str, required: bool| match o.get(f) {
        Some(Value::Number(n)) => Some(n.as_f64()),
        None | Some(Value::Null) if !required => Some(None),
        None => {
            fields.push(name(f), "required");
            None
        }
        Some(_) => {
            fields.push(name(f), "must be a number");
            None
        }
    };
    let (x, y, mu) = (number("x", true), number("y", true), number("mu", false));
    Some(KeypointEdit { t: t?, k: k?, x: x??, y: y??, mu: mu? })
}

pub fn parse_rollout(obj: &Map<String, Value>, default_predict: usize) -> Result<RolloutBody, ApiError> {
    let mut fields = Fields::default();
    check_unknown(obj, &["sequence_id", "edits", "samples", "predict_steps", "seed", "decode_frames", "mode"], &mut fields);
    let sequence_id = fields.uint(obj, "sequence_id", None, u64::MAX);
    let samples = fields.uint(obj, "samples", None, MAX_SAMPLES);
    if samples == Some(0) {
        fields.push("samples", "must be at least 1");
    }
    let predict_steps = fields.uint(obj, "predict_steps", Some(default_predict as u64), MAX_PREDICT_STEPS);
    let seed = fields.uint(obj, "seed", Some(0), u64::MAX);
    let decode_frames = match obj.get("decode_frames") {
        None | Some(Value::Null) => Some(true),
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => {
            fields.push("decode_frames", "must be a boolean");
            None
        }
    };
    let feed = match obj.get("mode").map(|v| v.as_str()) {
        None | Some(Some("decoded")) => Some(ObservedFeed::Decoded),
        Some(Some("detected")) => Some(ObservedFeed::Detected),
        Some(_) => {
            fields.push("mode", "must be \"decoded\" or \"detected\"");
            None
        }
    };
    let edits = match obj.get("edits") {
        None | Some(Value::Null) => Some(Vec::new()),
        Some(Value::Array(items)) => items.iter().enumerate().map(|(i, v)| parse_edit(v, i, &mut fields)).collect(),
        Some(_) => {
            fields.push("edits", "must be an array");
            None
        }
    };
    fields.finish()?;
    let missing = || ApiError::internal("validated field missing");
    Ok(RolloutBody {
        sequence_id: sequence_id.ok_or_else(missing)? as usize,
        edits: edits.ok_or_else(missing)?,
        samples: samples.ok_or_else(missing)? as usize,
        predict_steps: predict_steps.ok_or_else(missing)? as usize,
        seed: seed.ok_or_else(missing)?,
        decode_frames: decode_frames.ok_or_else(missing)?,
        feed: feed.ok_or_else(missing)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub sequence_id: usize,
    pub samples: usize,
    pub observed_steps: usize,
    pub predict_steps: usize,
    pub seed: u64,
    /// `samples x (T + ΔT) x K x [x, y, μ]`.
    pub keypoints: Vec<Vec<Vec<[f64; 3]>>>,
    /// Observed keypoints after edits, `T x K x [x, y, μ]`.
    pub observed: Vec<Vec<[f64; 3]>>,
    /// One base64 PNG strip of the ΔT predicted frames per sample.
    pub frames: Option<Vec<String>>,
}

pub fn run_rollout(s: &AppState, body: &RolloutBody) -> Result<RolloutResponse, ApiError> {
    let d = dataset(s)?;
    if body.sequence_id >= d.len() {
        return Err(ApiError::not_found(format!("sequence {} not found", body.sequence_id)));
    }
    let t_obs = s.model.hyper.observed_steps;
    let video = d.video(body.sequence_id).map_err(ApiError::internal)?;
    let observed = s.model.detect(&video.window(0, t_obs)).map_err(ApiError::internal)?;
    let edited = apply_edits(&observed, &body.edits).map_err(|e| match e {
        CoreError::Edit(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m),
        other => ApiError::internal(other),
    })?;
    let mut opts = CounterfactualOptions::new(body.predict_steps, body.samples, body.seed);
    opts.feed = body.feed;
    opts.actions = crate::commands::model_actions(&s.model, d, body.sequence_id);
    if let Some(a) = &opts.actions {
        if a.len() < t_obs + body.predict_steps {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("sequence has actions for {} steps, rollout needs {}", a.len(), t_obs + body.predict_steps)));
        }
    }
    let reference = body.decode_frames.then_some((&video, &observed[0]));
    let res = counterfactual_rollout(&s.model, &edited, &opts, reference).map_err(ApiError::internal)?;
    let frames = match &res.frames {
        None => None,
        Some(all) => Some(
            all.iter()
                .map(|f| {
                    let imgs: Vec<Vec<u8>> = f.iter().map(|fr| images::to_rgb(fr, video.channels)).collect();
                    images::base64_png(&images::strip(&imgs, video.width, video.height), imgs.len() * video.width, video.height)
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    Ok(RolloutResponse {
        sequence_id: body.sequence_id,
        samples: body.samples,
        observed_steps: t_obs,
        predict_steps: body.predict_steps,
        seed: body.seed,
        keypoints: res.keypoints.iter().map(|traj| traj.iter().map(triples).collect()).collect(),
        observed: edited.iter().map(triples).collect(),
        frames,
    })
}

async fn rollout(State(s): State<Shared>, body: Bytes) -> Result<Json<RolloutResponse>, ApiError> {
    let obj = parse_object(&body)?;
    let req = parse_rollout(&obj, s.model.hyper.predicted_steps)?;
    tokio::task::spawn_blocking(move || run_rollout(&s, &req)).await.map_err(ApiError::internal)?.map(Json)
}
