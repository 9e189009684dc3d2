//! HTTP facade over the engine and trainer for live score-steered editing.
//!
//! Endpoints (see `openapi.yaml` at the repository root):
//! `POST /images`, `POST /enhance`, `POST /ratings`, `POST /finetune`,
//! `GET /model`, `GET /healthz`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scoreguide_core::color::{decode_png, encode_png, ImageBuffer};
use scoreguide_core::engine::{EnhanceRequest, Engine, EngineError, LabelChoice};
use scoreguide_core::mos::normalize_direct;
use scoreguide_core::trainer::{build_dataset, finetune, TrainConfig, TrainingPair};

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;
const RATING_LIMIT: f64 = 2.5;
const LIVE_SUBJECT: &str = "live";
const RATINGS_HEADER: &str = "subject_id,image_id,rating,score_context,timestamp";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    /// Append-only ratings log.
    pub ratings_csv: PathBuf,
    /// Where the fine-tuned checkpoint is written after each swap, if anywhere.
    pub checkpoint_out: Option<PathBuf>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn new(ratings_csv: impl Into<PathBuf>) -> Self {
        Self {
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            ratings_csv: ratings_csv.into(),
            checkpoint_out: None,
            finetune_epochs: 10,
            finetune_lr: TrainConfig::default().lr,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LiveRating {
    pub image_id: String,
    pub score_context: f64,
    pub rating: f64,
    pub timestamp: u64,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct FinetuneStatus {
    pub running: bool,
    pub completed_jobs: u64,
    pub last_error: Option<String>,
}

struct Inner {
    config: ServiceConfig,
    engine: RwLock<Arc<Engine>>,
    revision: AtomicU64,
    images: Mutex<HashMap<String, Arc<ImageBuffer>>>,
    next_image: AtomicU64,
    ratings: Mutex<Vec<LiveRating>>,
    finetune: Mutex<FinetuneStatus>,
    cancel: AtomicBool,
}

/// Shared session state: one model, the uploaded images and the live ratings.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(engine: Engine, config: ServiceConfig) -> Self {
        Self(Arc::new(Inner {
            config,
            engine: RwLock::new(Arc::new(engine)),
            revision: AtomicU64::new(0),
            images: Mutex::new(HashMap::new()),
            next_image: AtomicU64::new(1),
            ratings: Mutex::new(Vec::new()),
            finetune: Mutex::new(FinetuneStatus::default()),
            cancel: AtomicBool::new(false),
        }))
    }

    /// The model currently serving requests.
    pub fn engine(&self) -> Arc<Engine> {
        self.0.engine.read().expect("engine lock").clone()
    }

    /// Incremented on every checkpoint swap.
    pub fn revision(&self) -> u64 {
        self.0.revision.load(Ordering::SeqCst)
    }

    pub fn finetune_status(&self) -> FinetuneStatus {
        self.0.finetune.lock().expect("status lock").clone()
    }

    pub fn ratings(&self) -> Vec<LiveRating> {
        self.0.ratings.lock().expect("ratings lock").clone()
    }

    /// Asks a running fine-tune to stop after its current epoch without swapping.
    pub fn cancel_finetune(&self) {
        self.0.cancel.store(true, Ordering::SeqCst);
    }

    fn image(&self, id: &str) -> Option<Arc<ImageBuffer>> {
        self.0.images.lock().expect("images lock").get(id).cloned()
    }

    fn swap(&self, engine: Engine) {
        *self.0.engine.write().expect("engine lock") = Arc::new(engine);
        self.0.revision.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::Color(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_upload_bytes;
    Router::new()
        .route("/images", post(upload))
        .route("/enhance", post(enhance))
        .route("/ratings", post(rate))
        .route("/finetune", post(start_finetune))
        .route("/model", get(model))
        .route("/healthz", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn content_type(headers: &HeaderMap) -> String {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.split(';').next().unwrap_or("").trim().to_ascii_lowercase())
        .unwrap_or_default()
}

fn body_error(status: StatusCode, message: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "upload exceeds the size limit")
    } else {
        ApiError::new(status, message)
    }
}

#[derive(Deserialize)]
struct Base64Upload {
    image: String,
}

async fn upload_bytes(req: Request) -> Result<Bytes, ApiError> {
    match content_type(req.headers()).as_str() {
        "multipart/form-data" => {
            let mut form = Multipart::from_request(req, &())
                .await
                .map_err(|e| body_error(e.status(), e.body_text()))?;
            while let Some(field) = form.next_field().await.map_err(|e| body_error(e.status(), e.body_text()))? {
                if field.name() == Some("image") || field.file_name().is_some() {
                    return field.bytes().await.map_err(|e| body_error(e.status(), e.body_text()));
                }
            }
            Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "multipart body has no image field"))
        }
        "application/json" => {
            let body = Bytes::from_request(req, &()).await.map_err(|e| body_error(e.status(), e.body_text()))?;
            let parsed: Base64Upload = serde_json::from_slice(&body)
                .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("expected {{\"image\": base64}}: {e}")))?;
            base64::engine::general_purpose::STANDARD
                .decode(parsed.image.trim())
                .map(Bytes::from)
                .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("bad base64: {e}")))
        }
        _ => Bytes::from_request(req, &()).await.map_err(|e| body_error(e.status(), e.body_text())),
    }
}

async fn upload(State(state): State<AppState>, req: Request) -> Result<Json<serde_json::Value>, ApiError> {
    let bytes = upload_bytes(req).await?;
    if bytes.len() > state.0.config.max_upload_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "upload exceeds the size limit"));
    }
    let image = decode_png(&bytes).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("not a PNG image: {e}")))?;
    let id = format!("img-{}", state.0.next_image.fetch_add(1, Ordering::SeqCst));
    let (w, h) = (image.width(), image.height());
    state.0.images.lock().expect("images lock").insert(id.clone(), Arc::new(image));
    Ok(Json(json!({ "image_id": id, "width": w, "height": h })))
}

/// `label` in requests: a number `1..=10`, `"auto"`, or `null`/missing (auto).
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelField {
    Fixed(u8),
    Named(String),
}

fn label_choice(field: Option<LabelField>) -> Result<LabelChoice, ApiError> {
    match field {
        None => Ok(LabelChoice::Auto { mask: None }),
        Some(LabelField::Fixed(l)) => Ok(LabelChoice::Fixed(l)),
        Some(LabelField::Named(s)) if s.eq_ignore_ascii_case("auto") => Ok(LabelChoice::Auto { mask: None }),
        Some(LabelField::Named(s)) if s.eq_ignore_ascii_case("none") => Ok(LabelChoice::Absent),
        Some(LabelField::Named(s)) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown label {s:?}"))),
    }
}

#[derive(Debug, Deserialize)]
struct EnhanceBody {
    image_id: String,
    score: f64,
    #[serde(default)]
    label: Option<LabelField>,
    #[serde(default)]
    rounds: Option<usize>,
}

async fn enhance(State(state): State<AppState>, Json(body): Json<EnhanceBody>) -> Result<Response, ApiError> {
    let image = state
        .image(&body.image_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {:?}", body.image_id)))?;
    let engine = state.engine();
    let extended = engine.check_score(body.score)?;
    let req = EnhanceRequest::new(body.score)
        .with_label(label_choice(body.label)?)
        .with_rounds(body.rounds.unwrap_or(1));
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        let out = engine.enhance(&image, &req)?;
        encode_png(&out).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut resp = ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png).into_response();
    resp.headers_mut()
        .insert("x-model-revision", HeaderValue::from(state.revision()));
    if extended {
        resp.headers_mut()
            .insert("x-score-warning", HeaderValue::from_static("score outside [-1, 1]; behavior is model-dependent"));
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    image_id: String,
    adjusted_score_context: f64,
    rating: f64,
}

fn append_rating(path: &PathBuf, r: &LiveRating) -> std::io::Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{RATINGS_HEADER}")?;
    }
    writeln!(file, "{LIVE_SUBJECT},{},{},{},{}", r.image_id, r.rating, r.score_context, r.timestamp)
}

async fn rate(State(state): State<AppState>, Json(body): Json<RatingBody>) -> Result<Json<serde_json::Value>, ApiError> {
    if !body.rating.is_finite() || body.rating.abs() > RATING_LIMIT {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("rating {} is outside [-2.5, 2.5]", body.rating),
        ));
    }
    if !body.adjusted_score_context.is_finite() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "score context must be finite"));
    }
    if state.image(&body.image_id).is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {:?}", body.image_id)));
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let rating = LiveRating {
        image_id: body.image_id,
        score_context: body.adjusted_score_context,
        rating: body.rating,
        timestamp,
    };
    let mut ratings = state.0.ratings.lock().expect("ratings lock");
    append_rating(&state.0.config.ratings_csv, &rating)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("ratings log: {e}")))?;
    ratings.push(rating);
    Ok(Json(json!({ "stored": ratings.len() })))
}

#[derive(Debug, Default, Deserialize)]
struct FinetuneBody {
    #[serde(default)]
    epochs: Option<usize>,
}

/// One pair per live rating: the raw upload against its enhancement at the
/// rated score context, trained at the directly normalized rating.
fn rating_pairs(state: &AppState, engine: &Engine) -> Result<Vec<TrainingPair>, ApiError> {
    let mut pairs = Vec::new();
    for r in state.ratings() {
        let raw = state
            .image(&r.image_id)
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("rated image {} is gone", r.image_id)))?;
        let auto = LabelChoice::Auto { mask: None };
        let label = engine.resolve_label(&raw, &auto)?;
        let target = engine.enhance(&raw, &EnhanceRequest::new(r.score_context).with_label(auto))?;
        pairs.push(TrainingPair {
            raw_id: r.image_id.clone(),
            raw,
            target: Arc::new(target),
            score: normalize_direct(r.rating),
            label,
            mask: None,
        });
    }
    Ok(pairs)
}

async fn start_finetune(
    State(state): State<AppState>,
    body: Option<Json<FinetuneBody>>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let body = body.map(|b| b.0).unwrap_or_default();
    let epochs = body.epochs.unwrap_or(state.0.config.finetune_epochs);
    if epochs == 0 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "epochs must be at least 1"));
    }
    if state.ratings().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "fine-tuning needs at least one rating"));
    }
    {
        let mut status = state.0.finetune.lock().expect("status lock");
        if status.running {
            return Err(ApiError::new(StatusCode::CONFLICT, "a fine-tune is already running"));
        }
        status.running = true;
        status.last_error = None;
    }
    state.0.cancel.store(false, Ordering::SeqCst);
    let job = state.clone();
    tokio::task::spawn_blocking(move || {
        let result = run_finetune(&job, epochs);
        let mut status = job.0.finetune.lock().expect("status lock");
        status.running = false;
        match result {
            Ok(()) => status.completed_jobs += 1,
            Err(e) => {
                log::error!("fine-tune failed: {}", e.message);
                status.last_error = Some(e.message);
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "status": "started", "epochs": epochs }))))
}

fn run_finetune(state: &AppState, epochs: usize) -> Result<(), ApiError> {
    let engine = state.engine();
    let internal = |e: String| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e);
    let pairs = rating_pairs(state, &engine)?;
    let base = engine.checkpoint();
    let cfg = TrainConfig {
        epochs,
        lr: state.0.config.finetune_lr,
        seed: state.0.config.seed,
        arch: base.arch().clone(),
        ..TrainConfig::default()
    };
    let dataset = build_dataset(&pairs, &cfg, engine.centers()).map_err(|e| internal(e.to_string()))?;
    let cancel = &state.0.cancel;
    let mut observer = |_: &_, _: &_| {
        if cancel.load(Ordering::SeqCst) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let outcome = finetune(base, &dataset, &cfg, &mut observer).map_err(|e| internal(e.to_string()))?;
    if cancel.load(Ordering::SeqCst) {
        return Err(internal("cancelled".into()));
    }
    if let Some(path) = &state.0.config.checkpoint_out {
        outcome.checkpoint.save(path).map_err(|e| internal(e.to_string()))?;
    }
    let mut next = Engine::new(outcome.checkpoint);
    if let Some(c) = engine.centers() {
        next = next.with_centers(c.clone());
    }
    state.swap(next);
    Ok(())
}

async fn model(State(state): State<AppState>) -> Json<serde_json::Value> {
    let engine = state.engine();
    let ck = engine.checkpoint();
    Json(json!({
        "revision": state.revision(),
        "arch": ck.arch(),
        "metadata": ck.meta,
        "centers": engine.centers().map(|c| c.provenance().to_string()),
        "finetune": state.finetune_status(),
        "ratings": state.ratings().len(),
    }))
}
