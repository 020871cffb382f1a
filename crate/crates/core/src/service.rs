//! HTTP job service over a shared set of trained models.

use std::collections::HashMap;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::cors::CorsLayer;

use crate::error::{Error, Result};
use crate::eval::faithfulness;
use crate::guidance::{Controls, GuidanceConfig, Method, Models};
use crate::imageio::{decode_mask_png, decode_png, encode_png};
use crate::scenegen::{self, IMAGE_SIZE, VOCABULARY};
use crate::semctl::{self, SemanticRegion};
use crate::tensor::Tensor;

pub const DEFAULT_PORT: u16 = 8787;
pub const QUEUE_CAP: usize = 64;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBody {
    pub mask: String,
    pub label: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeBody {
    pub painting: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub regions: Vec<RegionBody>,
    pub method: String,
    /// Partial GuidanceConfig; unknown keys are rejected.
    #[serde(default)]
    pub config: serde_json::Map<String, Value>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub record_attention: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub token: String,
    /// Base64 PNG, 64×64.
    pub png: String,
    /// Row-major 8×8 values in [0, 1].
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    /// Base64 PNG of the output.
    pub image: String,
    pub losses: Vec<f64>,
    /// Faithfulness of the returned PNG against the submitted painting.
    pub faithfulness: f64,
    pub attention: Option<Vec<Heatmap>>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub method: Method,
    pub state: JobState,
    pub progress: Progress,
    pub result: Option<JobResult>,
    pub error: Option<String>,
}

/// A validated request ready to run.
#[derive(Clone, Debug)]
pub struct JobSpec {
    pub painting: Tensor,
    pub tokens: Vec<usize>,
    pub regions: Vec<SemanticRegion>,
    pub method: Method,
    pub config: GuidanceConfig,
    pub record_attention: bool,
}

struct Shared {
    models: Arc<Models>,
    jobs: Mutex<HashMap<String, Job>>,
    queue: SyncSender<(String, JobSpec)>,
    workers: usize,
}

/// Server state; clones share the same job table and workers.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

fn decode_b64_png(field: &str, s: &str) -> std::result::Result<Vec<u8>, ApiError> {
    let s = s.strip_prefix("data:image/png;base64,").unwrap_or(s);
    B64.decode(s.trim()).map_err(|e| bad_request(format!("{field}: invalid base64: {e}")))
}

/// Checks a request against the vocabulary, image sizes and config
/// invariants.
pub fn validate_request(body: &SynthesizeBody) -> std::result::Result<JobSpec, ApiError> {
    let method: Method = body.method.parse().map_err(bad_request)?;
    let painting = decode_png(&decode_b64_png("painting", &body.painting)?).map_err(|e| bad_request(format!("painting: {e}")))?;
    if painting.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(bad_request(format!("painting must be 64×64, got {:?}", &painting.shape()[1..])));
    }
    let tokens = scenegen::parse_tokens(&body.tokens).map_err(bad_request)?;
    let regions = body
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mask = decode_mask_png(&decode_b64_png("mask", &r.mask)?).map_err(|e| bad_request(format!("region {i} mask: {e}")))?;
            if mask.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
                return Err(bad_request(format!("region {i}: bad mask size {:?}, expected 64×64", mask.shape())));
            }
            let label = scenegen::token_id(&r.label).map_err(bad_request)?;
            SemanticRegion::new(mask, label, r.weight).map_err(|e| bad_request(format!("region {i}: {e}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if !regions.is_empty() && !matches!(method, Method::GradOp | Method::GradOpPlus | Method::SdEdit) {
        return Err(bad_request(format!("regions need method gradop, gradop+ or sdedit, not {method}")));
    }
    let tokens = semctl::build_modified_prompt(&tokens, &regions).map_err(bad_request)?;
    let mut merged = serde_json::to_value(GuidanceConfig::default()).expect("config serializes");
    if let Value::Object(m) = &mut merged {
        m.extend(body.config.clone());
    }
    let mut config: GuidanceConfig = serde_json::from_value(merged).map_err(|e| bad_request(format!("config: {e}")))?;
    if let Some(seed) = body.seed {
        config.seed = seed;
    }
    config.validate().map_err(bad_request)?;
    Ok(JobSpec { painting, tokens, regions, method, config, record_attention: body.record_attention })
}

/// Runs one job to completion, reporting reverse-step progress.
pub fn run_job(models: &Models, spec: &JobSpec, progress: &(dyn Fn(usize, usize) + Sync)) -> Result<JobResult> {
    let result = if spec.regions.is_empty() && !spec.record_attention {
        let ctl = Controls { attention: None, progress: Some(progress) };
        models.synthesize(spec.method, &spec.painting, &spec.tokens, &spec.config, ctl)?
    } else if matches!(spec.method, Method::GradOp | Method::GradOpPlus | Method::SdEdit) {
        semctl::controlled_synthesis(
            models,
            &spec.painting,
            &spec.tokens,
            &spec.regions,
            spec.method,
            &spec.config,
            spec.record_attention,
            Some(progress),
        )?
    } else {
        let mut hook = semctl::RegionControl::new(Vec::new(), true);
        let ctl = Controls { attention: Some(&mut hook), progress: Some(progress) };
        let mut r = models.synthesize(spec.method, &spec.painting, &spec.tokens, &spec.config, ctl)?;
        r.attention = hook.into_record();
        r
    };
    let png = encode_png(&result.image)?;
    let returned = decode_png(&png)?;
    let attention = match spec.record_attention {
        true => Some(
            semctl::attention_diagnostics(&result)?
                .into_iter()
                .map(|m| {
                    Ok(Heatmap {
                        token: scenegen::token_name(m.token).unwrap_or("?").to_string(),
                        png: B64.encode(encode_png(&semctl::heatmap(&m.map)?)?),
                        values: m.map.data().to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        false => None,
    };
    Ok(JobResult {
        image: B64.encode(&png),
        losses: result.losses,
        faithfulness: faithfulness(&returned, &spec.painting)?,
        attention,
        seconds: result.seconds,
    })
}

impl AppState {
    /// Starts `workers` synthesis threads (at least one).
    pub fn new(models: Models, workers: usize) -> Self {
        let (tx, rx) = sync_channel(QUEUE_CAP);
        let shared = Arc::new(Shared { models: Arc::new(models), jobs: Mutex::new(HashMap::new()), queue: tx, workers: workers.max(1) });
        let rx = Arc::new(Mutex::new(rx));
        for i in 0..shared.workers {
            let weak = Arc::downgrade(&shared);
            let rx = Arc::clone(&rx);
            std::thread::Builder::new()
                .name(format!("synth-{i}"))
                .spawn(move || worker(weak, rx))
                .expect("spawn worker thread");
        }
        Self(shared)
    }

    /// Default worker count: available cores, capped at 4.
    pub fn default_workers() -> usize {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
    }

    pub fn models(&self) -> &Models {
        &self.0.models
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.0.jobs.lock().expect("job table").get(id).cloned()
    }

    /// Enqueues a validated job and returns its id.
    pub fn submit(&self, spec: JobSpec) -> std::result::Result<String, ApiError> {
        let total = self.0.models.planned_steps(spec.method, &spec.config).map_err(bad_request)?;
        let id = uuid::Uuid::new_v4().to_string();
        let job = Job {
            id: id.clone(),
            method: spec.method,
            state: JobState::Queued,
            progress: Progress { step: 0, total },
            result: None,
            error: None,
        };
        let mut jobs = self.0.jobs.lock().expect("job table");
        match self.0.queue.try_send((id.clone(), spec)) {
            Ok(()) => {
                jobs.insert(id.clone(), job);
                Ok(id)
            }
            Err(TrySendError::Full(_)) => {
                Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("queue full ({QUEUE_CAP} jobs waiting)")))
            }
            Err(TrySendError::Disconnected(_)) => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "workers stopped".into())),
        }
    }
}

fn update(shared: &Shared, id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(job) = shared.jobs.lock().expect("job table").get_mut(id) {
        if !matches!(job.state, JobState::Done | JobState::Failed) {
            f(job);
        }
    }
}

fn worker(shared: std::sync::Weak<Shared>, rx: Arc<Mutex<Receiver<(String, JobSpec)>>>) {
    loop {
        let next = rx.lock().expect("queue").recv();
        let Ok((id, spec)) = next else { return };
        let Some(shared) = shared.upgrade() else { return };
        update(&shared, &id, |j| j.state = JobState::Running);
        let progress = |step: usize, total: usize| {
            update(&shared, &id, |j| j.progress = Progress { step, total });
        };
        let outcome = run_job(&shared.models, &spec, &progress);
        update(&shared, &id, |j| match outcome {
            Ok(r) => {
                j.state = JobState::Done;
                j.progress.step = j.progress.total;
                j.result = Some(r);
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        });
    }
}

async fn synthesize(State(state): State<AppState>, body: axum::body::Bytes) -> std::result::Result<impl IntoResponse, ApiError> {
    let body: SynthesizeBody = serde_json::from_slice(&body).map_err(|e| bad_request(format!("body: {e}")))?;
    let spec = validate_request(&body)?;
    let id = state.submit(spec)?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": id }))))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> std::result::Result<Json<Job>, ApiError> {
    state.job(&id).map(Json).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub vocabulary: Vec<String>,
    pub methods: Vec<Method>,
    pub defaults: GuidanceConfig,
    pub checkpoints: HashMap<String, String>,
    pub workers: usize,
}

pub fn meta(state: &AppState) -> Meta {
    Meta {
        vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
        methods: Method::ALL.to_vec(),
        defaults: GuidanceConfig::default(),
        checkpoints: HashMap::from([
            ("autoencoder".to_string(), state.0.models.ae.digest()),
            ("denoiser".to_string(), state.0.models.denoiser.digest()),
        ]),
        workers: state.0.workers,
    }
}

async fn get_meta(State(state): State<AppState>) -> Json<Meta> {
    Json(meta(&state))
}

/// API routes, plus static files from `ui_dir` when given.
pub fn router(state: AppState, ui_dir: Option<std::path::PathBuf>) -> Router {
    let api = Router::new()
        .route("/synthesize", post(synthesize))
        .route("/jobs/{id}", get(get_job))
        .route("/meta", get(get_meta))
        .with_state(state);
    let api = match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    api.layer(CorsLayer::permissive())
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, port: u16, ui_dir: Option<std::path::PathBuf>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(Error::Io)
}
