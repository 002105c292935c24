//! HTTP retrieval over a prebuilt gallery index.
//!
//! `GET /api/health`, `POST /api/retrieve?k=N` (multipart field, JSON
//! `{"image": "<base64>"}`, or a raw image body), and
//! `GET /api/shapes/{id}/views/{n}`. Shape ids contain `/`, so clients
//! percent-encode them in the path.

mod config;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use sbsr_core::aggregation::EmbeddingSet;
use sbsr_core::backbone::{open_backbone, Backbone};
use sbsr_core::dataset::DatasetManifest;
use sbsr_core::encoders::{open_captioner, open_clip, Captioner, ClipEncoder};
use sbsr_core::eval::{check_index_compat, embed_query, rank, EmbeddingIndex};
use sbsr_core::imaging::decode_image;
use sbsr_core::model::Model;
use sbsr_core::train::Checkpoint;
use sbsr_core::util::sha256_hex;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use config::ServiceConfig;

const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("undecodable image: {0}")]
    BadImage(String),
    #[error("k must be in 1..={max}, got {k}")]
    KOutOfRange { k: usize, max: usize },
    #[error("backbone busy: {0}")]
    Busy(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadImage(_) => StatusCode::BAD_REQUEST,
            Self::KOutOfRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Busy(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Startup(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<sbsr_core::Error> for ServiceError {
    fn from(e: sbsr_core::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.to_string() }));
        (self.status(), body).into_response()
    }
}

/// Everything a request needs; immutable after startup apart from the thumbnail cache.
pub struct AppState {
    pub config: ServiceConfig,
    pub manifest: DatasetManifest,
    pub model: Model,
    pub index: EmbeddingIndex,
    pub backbone: Box<dyn Backbone>,
    pub clip: Box<dyn ClipEncoder>,
    pub captioner: Box<dyn Captioner>,
    pub checkpoint_hash: String,
    pub index_hash: String,
    pub manifest_hash: String,
    gate: Arc<Semaphore>,
    waiting: AtomicUsize,
    thumbnails: Mutex<HashMap<(String, usize), Bytes>>,
}

fn read_asset(kind: &str, path: &Path) -> Result<Vec<u8>, ServiceError> {
    if path.as_os_str().is_empty() {
        return Err(ServiceError::Startup(format!("no {kind} path configured")));
    }
    std::fs::read(path).map_err(|e| ServiceError::Startup(format!("missing {kind} {}: {e}", path.display())))
}

impl AppState {
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        let startup = |what: &str, e: sbsr_core::Error| ServiceError::Startup(format!("{what}: {e}"));
        let ckpt_bytes = read_asset("checkpoint", &config.checkpoint)?;
        let index_bytes = read_asset("index", &config.index)?;
        read_asset("manifest", &config.manifest)?;

        let ckpt = Checkpoint::from_bytes(&ckpt_bytes).map_err(|e| startup("checkpoint", e))?;
        let manifest = DatasetManifest::load(&config.manifest).map_err(|e| startup("manifest", e))?;
        let (set, meta) = EmbeddingSet::load(&config.index).map_err(|e| startup("index", e))?;
        let model = ckpt.model().map_err(|e| startup("checkpoint", e))?;
        let manifest_hash = manifest.content_hash().map_err(|e| startup("manifest", e))?;
        let params = model.params_checksum().map_err(|e| startup("checkpoint", e))?;
        check_index_compat(&meta, &ckpt, &manifest_hash, &params).map_err(|e| startup("compatibility", e))?;
        let index = EmbeddingIndex::from_set(set).map_err(|e| startup("index", e))?;
        if index.is_empty() {
            return Err(ServiceError::Startup("index is empty".into()));
        }

        let dims = model.dims.clone();
        let backbone = open_backbone(&config.backbone, dims.clone()).map_err(|e| startup("backbone", e))?;
        model.check_backbone(backbone.as_ref()).map_err(|e| startup("backbone", e))?;
        let clip = open_clip(&config.clip, dims.vision_dim, dims.patch_grid).map_err(|e| startup("clip", e))?;
        let captioner = open_captioner(&config.captioner).map_err(|e| startup("captioner", e))?;
        if config.k_default == 0 {
            return Err(ServiceError::Startup("k_default must be at least 1".into()));
        }
        Ok(Self {
            checkpoint_hash: sha256_hex(&ckpt_bytes),
            index_hash: sha256_hex(&index_bytes),
            manifest_hash,
            config,
            manifest,
            model,
            index,
            backbone,
            clip,
            captioner,
            gate: Arc::new(Semaphore::new(1)),
            waiting: AtomicUsize::new(0),
            thumbnails: Mutex::new(HashMap::new()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
    pub index_hash: String,
    pub manifest_hash: String,
    pub gallery_size: usize,
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub shape_id: String,
    pub category: String,
    pub score: f64,
    pub thumbnail_url: String,
    pub view_urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub queue_ms: f64,
    pub embed_ms: f64,
    pub rank_ms: f64,
    pub serialize_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    /// Deterministic token derived from the preprocessed query pixels.
    pub query: String,
    pub k: usize,
    pub entries: Vec<ResultEntry>,
    pub timing: Timing,
}

#[derive(Debug, Deserialize)]
struct RetrieveParams {
    k: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct JsonPayload {
    image: String,
}

/// Percent-encodes everything except unreserved characters, so ids with `/` fit one path segment.
pub fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn view_url(shape_id: &str, n: usize) -> String {
    format!("/api/shapes/{}/views/{n}", encode_segment(shape_id))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/retrieve", post(retrieve))
        .route("/api/shapes/{id}/views/{n}", get(thumbnail))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn_with_state(state.clone(), cors))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint_hash: st.checkpoint_hash.clone(),
        index_hash: st.index_hash.clone(),
        manifest_hash: st.manifest_hash.clone(),
        gallery_size: st.index.len(),
        profile: st.model.config.profile.clone(),
    })
}

async fn payload_bytes(headers: &HeaderMap, req: Request) -> Result<Vec<u8>, ServiceError> {
    let kind = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if kind.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadImage(e.to_string()))?;
        while let Some(field) = form.next_field().await.map_err(|e| ServiceError::BadImage(e.to_string()))? {
            let named_image = matches!(field.name(), Some("image" | "sketch" | "file"));
            let bytes = field.bytes().await.map_err(|e| ServiceError::BadImage(e.to_string()))?;
            if named_image || !bytes.is_empty() {
                return Ok(bytes.to_vec());
            }
        }
        Err(ServiceError::BadImage("multipart body has no image field".into()))
    } else if kind.starts_with("application/json") {
        let Json(p) = Json::<JsonPayload>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadImage(e.body_text()))?;
        let data = p.image.split_once("base64,").map_or(p.image.as_str(), |(_, d)| d);
        base64::engine::general_purpose::STANDARD
            .decode(data.trim())
            .map_err(|e| ServiceError::BadImage(format!("base64: {e}")))
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadImage(e.to_string()))?;
        Ok(body.to_vec())
    }
}

/// Waits for the single backbone slot, turning requests away when the queue is full
/// or the deadline passes.
async fn acquire_backbone(st: &AppState) -> Result<tokio::sync::OwnedSemaphorePermit, ServiceError> {
    let ahead = st.waiting.fetch_add(1, Ordering::SeqCst);
    if ahead >= st.config.queue_depth {
        st.waiting.fetch_sub(1, Ordering::SeqCst);
        return Err(ServiceError::Busy(format!("{ahead} requests already queued")));
    }
    let deadline = Duration::from_secs_f64(st.config.deadline_secs.max(0.0));
    let permit = tokio::time::timeout(deadline, st.gate.clone().acquire_owned()).await;
    st.waiting.fetch_sub(1, Ordering::SeqCst);
    match permit {
        Ok(Ok(p)) => Ok(p),
        Ok(Err(_)) => Err(ServiceError::Internal("backbone gate closed".into())),
        Err(_) => Err(ServiceError::Busy(format!("no backbone slot within {:.1}s", deadline.as_secs_f64()))),
    }
}

async fn retrieve(
    State(st): State<Arc<AppState>>,
    Query(params): Query<RetrieveParams>,
    headers: HeaderMap,
    req: Request,
) -> Result<Json<RetrieveResponse>, ServiceError> {
    let k = params.k.unwrap_or(st.config.k_default.min(st.index.len()));
    if k == 0 || k > st.index.len() {
        return Err(ServiceError::KOutOfRange { k, max: st.index.len() });
    }
    let bytes = payload_bytes(&headers, req).await?;
    let image = decode_image(&bytes).map_err(|e| ServiceError::BadImage(e.to_string()))?;

    let queued = Instant::now();
    let permit = acquire_backbone(&st).await?;
    let queue_ms = ms(queued);
    let started = Instant::now();
    let worker = st.clone();
    let embedded = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        embed_query(&worker.model, worker.backbone.as_ref(), &image, worker.clip.as_ref(), worker.captioner.as_ref())
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let (query, vector) = embedded?;
    let embed_ms = ms(started);

    let started = Instant::now();
    let ranked = rank(&query, &vector, &st.index)?;
    let rank_ms = ms(started);

    let started = Instant::now();
    let entries: Vec<ResultEntry> = ranked
        .entries
        .into_iter()
        .take(k)
        .map(|e| {
            let views = st.manifest.shape(&e.id).map_or(0, |s| s.view_uris.len());
            ResultEntry {
                thumbnail_url: view_url(&e.id, 0),
                view_urls: (0..views).map(|n| view_url(&e.id, n)).collect(),
                shape_id: e.id,
                category: e.label,
                score: e.score,
            }
        })
        .collect();
    let serialize_ms = ms(started);
    Ok(Json(RetrieveResponse {
        query,
        k,
        entries,
        timing: Timing {
            queue_ms,
            embed_ms,
            rank_ms,
            serialize_ms,
        },
    }))
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

async fn thumbnail(
    State(st): State<Arc<AppState>>,
    UrlPath((id, n)): UrlPath<(String, String)>,
) -> Result<Response, ServiceError> {
    let n: usize = n
        .parse()
        .map_err(|_| ServiceError::NotFound(format!("view {n:?}")))?;
    let key = (id.clone(), n);
    let cached = st.thumbnails.lock().expect("thumbnail cache poisoned").get(&key).cloned();
    let bytes = match cached {
        Some(b) => b,
        None => {
            let shape = st
                .manifest
                .shape(&id)
                .ok_or_else(|| ServiceError::NotFound(format!("shape {id}")))?;
            let path = shape
                .view_uris
                .get(n)
                .ok_or_else(|| ServiceError::NotFound(format!("view {n} of {id}")))?;
            let raw = std::fs::read(path).map_err(|e| ServiceError::NotFound(format!("{}: {e}", path.display())))?;
            let b = Bytes::from(raw);
            st.thumbnails.lock().expect("thumbnail cache poisoned").insert(key, b.clone());
            b
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn origin_allowed(cfg: &ServiceConfig, origin: &str) -> bool {
    cfg.cors_allow.iter().any(|o| o == "*" || o == origin)
}

async fn cors(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let origin = req
        .headers()
        .get(header::ORIGIN)
        .and_then(|v| v.to_str().ok())
        .filter(|o| origin_allowed(&st.config, o))
        .and_then(|o| HeaderValue::from_str(o).ok());
    let preflight = req.method() == Method::OPTIONS;
    let mut resp = if preflight {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    if let Some(o) = origin {
        let h = resp.headers_mut();
        h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, o);
        h.insert(header::VARY, HeaderValue::from_static("Origin"));
        if preflight {
            h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
            h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
        }
    }
    resp
}

/// Loads assets and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::load(config)).await.map_err(|e| {
        ServiceError::Startup(e.to_string())
    })??);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Startup(format!("bind {addr}: {e}")))?;
    log::info!("serving {} gallery shapes on http://{addr}", state.index.len());
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
