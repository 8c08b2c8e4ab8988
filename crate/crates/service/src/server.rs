//! HTTP front end over one immutable expert pool.
//!
//! The pool is loaded in the background after the listener is bound; until it
//! is ready every endpoint answers 503. The only mutable shared state is the
//! bounded model cache, which never changes what a response contains.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::{Deserialize, Serialize};

use poe_core::consolidate::{assemble, CompositeQuery, ExpertPool, PoolHyperparams};
use poe_core::data::Normalization;
use poe_core::netzoo::InputShape;
use poe_core::store::{load_pool, sha256_hex, Component};
use poe_core::tensor::{argmax, Tensor};
use poe_core::PoeError;

pub const DEFAULT_CACHE: usize = 64;

/// A model produced by `/v1/query`.
pub struct CachedModel {
    pub bytes: Vec<u8>,
    pub model: poe_core::consolidate::TaskModel,
}

pub struct LoadedPool {
    pub pool: ExpertPool,
    pub normalization: Option<Normalization>,
}

enum PoolState {
    Loading,
    Ready(Arc<LoadedPool>),
    Failed(String),
}

#[derive(Clone)]
pub struct AppState {
    pool: Arc<RwLock<PoolState>>,
    cache: Arc<Mutex<LruCache<String, Arc<CachedModel>>>>,
}

impl AppState {
    pub fn loading(cache: usize) -> Self {
        let cap = NonZeroUsize::new(cache).unwrap_or(NonZeroUsize::MIN);
        Self { pool: Arc::new(RwLock::new(PoolState::Loading)), cache: Arc::new(Mutex::new(LruCache::new(cap))) }
    }

    pub fn ready(pool: LoadedPool, cache: usize) -> Self {
        let s = Self::loading(cache);
        s.set(PoolState::Ready(Arc::new(pool)));
        s
    }

    fn set(&self, state: PoolState) {
        *self.pool.write().expect("pool lock") = state;
    }

    /// Loads `manifest` off the async runtime and publishes the result.
    pub async fn load(&self, manifest: PathBuf) {
        let res = tokio::task::spawn_blocking(move || load_pool(&manifest)).await;
        match res {
            Ok(Ok((pool, m))) => {
                log::info!("pool ready: {} experts", pool.experts.len());
                self.set(PoolState::Ready(Arc::new(LoadedPool { pool, normalization: m.normalization })));
            }
            Ok(Err(e)) => {
                log::error!("pool load failed: {e}");
                self.set(PoolState::Failed(e.to_string()));
            }
            Err(e) => self.set(PoolState::Failed(e.to_string())),
        }
    }

    fn current(&self) -> Result<Arc<LoadedPool>, ApiError> {
        match &*self.pool.read().expect("pool lock") {
            PoolState::Ready(p) => Ok(p.clone()),
            PoolState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "pool is still loading")),
            PoolState::Failed(msg) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "pool_unavailable", msg.clone())),
        }
    }

    fn cached(&self, id: &str) -> Option<Arc<CachedModel>> {
        self.cache.lock().expect("cache lock").get(id).cloned()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<PoeError> for ApiError {
    fn from(e: PoeError) -> Self {
        let (status, code) = match &e {
            PoeError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            PoeError::DigestMismatch { .. } => (StatusCode::CONFLICT, "digest_mismatch"),
            e if e.is_validation() => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code.into(), message: self.message } };
        (self.status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub name: String,
    pub classes: Vec<String>,
    pub bytes: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolSummary {
    pub tasks: Vec<TaskSummary>,
    pub library_digest: String,
    pub library_bytes: Option<u64>,
    pub total_bytes: Option<u64>,
    pub hyperparams: PoolHyperparams,
    pub input: InputShape,
}

async fn pool_summary(State(s): State<AppState>) -> Result<Json<PoolSummary>, ApiError> {
    let p = s.current()?;
    let pool = &p.pool;
    let tasks: Vec<TaskSummary> = pool
        .universe
        .primitives
        .iter()
        .filter_map(|t| {
            let e = pool.experts.get(&t.id)?;
            Some(TaskSummary {
                id: t.id.clone(),
                name: t.name.clone(),
                classes: t.class_indices.iter().map(|&c| pool.universe.classes[c].clone()).collect(),
                bytes: e.bytes,
            })
        })
        .collect();
    let total_bytes = tasks.iter().map(|t| t.bytes).sum::<Option<u64>>().zip(pool.library_bytes).map(|(a, b)| a + b);
    Ok(Json(PoolSummary {
        tasks,
        library_digest: pool.library_digest.clone(),
        library_bytes: pool.library_bytes,
        total_bytes,
        hyperparams: pool.hyper.clone(),
        input: pool.split.input(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryRequest {
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub model_id: String,
    pub classes: Vec<String>,
    pub params: usize,
    pub flops: u64,
    pub bytes: u64,
    pub assembly_ms: f64,
}

async fn query(State(s): State<AppState>, body: Result<Json<QueryRequest>, JsonRejection>) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = body?;
    let p = s.current()?;
    let started = Instant::now();
    let (id, entry) = blocking(move || {
        let q = CompositeQuery::new(req.tasks)?;
        let model = assemble(&p.pool, &q)?;
        let bytes = Component::TaskModel(model.clone()).to_bytes()?;
        Ok((sha256_hex(&bytes), Arc::new(CachedModel { bytes, model })))
    })
    .await?;
    let assembly_ms = started.elapsed().as_secs_f64() * 1e3;
    let resp = QueryResponse {
        model_id: id.clone(),
        classes: entry.model.class_names.clone(),
        params: entry.model.params,
        flops: entry.model.flops,
        bytes: entry.bytes.len() as u64,
        assembly_ms,
    };
    s.cache.lock().expect("cache lock").put(id, entry);
    Ok(Json(resp))
}

fn unknown_model(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "unknown_model", format!("no model `{id}`; query it first"))
}

async fn model_bytes(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    s.current()?;
    let m = s.cached(&id).ok_or_else(|| unknown_model(&id))?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], Bytes::from(m.bytes.clone())).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model_id: String,
    /// One image, channels first, row-major.
    pub input: Vec<f32>,
    /// `[C, H, W]` or `[1, C, H, W]`.
    pub shape: Vec<usize>,
    /// Input is already normalized; otherwise the pool's constants are applied.
    #[serde(default)]
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<f32>,
    pub class: String,
}

/// Softmax in f64 for stable probabilities.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

async fn predict(State(s): State<AppState>, body: Result<Json<PredictRequest>, JsonRejection>) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) = body?;
    let p = s.current()?;
    let m = s.cached(&req.model_id).ok_or_else(|| unknown_model(&req.model_id))?;
    let shape = match req.shape.as_slice() {
        [c, h, w] | [1, c, h, w] => [1, *c, *h, *w],
        other => return Err(ApiError::bad_request(format!("shape {other:?} is not one image"))),
    };
    let input = m.model.model.input();
    if shape[1..] != input.dims() {
        return Err(ApiError::bad_request(format!("model expects {:?}, got {:?}", input.dims(), &shape[1..])));
    }
    if req.input.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("input contains non-finite values"));
    }
    let mut x = Tensor::new(shape.to_vec(), req.input).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if !req.normalized {
        if let Some(n) = &p.normalization {
            n.apply_images(&mut x)?;
        }
    }
    blocking(move || {
        let logits = m.model.model.predict(&x, 1, poe_core::par::Exec::Sequential)?;
        let probs = softmax(logits.data());
        let class = m.model.class_names[argmax(&probs)].clone();
        Ok(Json(PredictResponse { probs, class }))
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/pool", get(pool_summary))
        .route("/v1/query", post(query))
        .route("/v1/models/{id}", get(model_bytes))
        .route("/v1/predict", post(predict))
        .with_state(state)
}

/// Binds `addr`, starts loading `manifest`, and serves until the process ends.
pub async fn serve(manifest: PathBuf, addr: &str, cache: usize) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, manifest, cache).await
}

/// Like [`serve`] on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, manifest: PathBuf, cache: usize) -> std::io::Result<()> {
    let state = AppState::loading(cache);
    let loader = state.clone();
    tokio::spawn(async move { loader.load(manifest).await });
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_statuses() {
        let cases = [
            (PoeError::UnknownTask("x".into()), StatusCode::NOT_FOUND),
            (PoeError::DigestMismatch { expected: "a".into(), found: "b".into() }, StatusCode::CONFLICT),
            (PoeError::Invalid("empty".into()), StatusCode::BAD_REQUEST),
            (PoeError::Io(std::io::Error::other("disk")), StatusCode::INTERNAL_SERVER_ERROR),
        ];
        for (e, status) in cases {
            assert_eq!(ApiError::from(e).status, status);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax(&p), 2);
    }
}
