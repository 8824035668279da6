//! HTTP API over the registry, store, and analysis, plus the live SSE stream
//! and the dashboard's static assets.
//!
//! | Method | Path                          | Body                         |
//! |--------|-------------------------------|------------------------------|
//! | GET    | `/api/system/now`             | `MemorySnapshot`             |
//! | GET    | `/api/runs`                   | `[RunRecord]`                |
//! | POST   | `/api/runs`                   | `RunRecord` (201)            |
//! | GET    | `/api/runs/{id}`              | `RunRecord`                  |
//! | POST   | `/api/runs/{id}/close`        | `RunRecord`                  |
//! | GET    | `/api/runs/{id}/samples`      | `[SampleRecord]`/`[Bucket]`  |
//! | GET    | `/api/runs/{id}/markers`      | `[Marker]`                   |
//! | POST   | `/api/runs/{id}/markers`      | `Marker` (201)               |
//! | GET    | `/api/runs/{id}/summary`      | `RunSummary`                 |
//! | GET    | `/api/runs/{id}/epochs`       | `[EpochStat]`                |
//! | GET    | `/api/compare?a=..&b=..`      | `CompareReport`              |
//! | GET    | `/api/live`                   | SSE, event `sample`          |
//!
//! Errors are `{"error":{"code":..,"message":..,"field":..}}` with status
//! 400, 404, or 500.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::Stream;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;
use tower_http::services::ServeDir;

use crate::analysis::{self, AnalysisError};
use crate::gateway::RunObserver;
use crate::live::LiveHub;
use crate::registry::{
    CloseStatus, FieldError, Hyperparameters, Marker, Registry, RegistryError, RunFilter, RunStatus,
};
use crate::sampler::{now_unix_ms, read_system_memory, SamplerConfig, SamplerError};
use crate::session::Recorder;
use crate::store::{downsample, SampleRecord, Store, StoreError};

pub const DEFAULT_HTTP_PORT: u16 = 8790;

/// Largest accepted `buckets` query value.
pub const MAX_BUCKETS: usize = 100_000;

const FALLBACK_INDEX: &str = "<!doctype html>\n<html><head><title>memscope</title></head>\n<body><h1>memscope</h1><p>No dashboard assets installed. Place the built dashboard under <code>&lt;data-dir&gt;/dashboard/</code>. The API is available under <a href=\"/api/runs\">/api/runs</a>.</p></body></html>\n";

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub store: Arc<Store>,
    pub hub: Arc<LiveHub>,
    /// Source for `/api/system/now`.
    pub sampler_config: SamplerConfig,
    /// When set, runs created or closed over HTTP are attached to or
    /// detached from this recorder.
    pub recorder: Option<Arc<Recorder>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn field(e: FieldError) -> Self {
        Self {
            field: Some(e.field.clone()),
            ..Self::bad_request("validation", e.to_string())
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": {"code": self.code, "message": self.message, "field": self.field}
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Validation(f) => Self::field(f),
            RegistryError::UnknownRun(_) => Self::new(StatusCode::NOT_FOUND, "unknown_run", e.to_string()),
            RegistryError::AlreadyClosed(_) => Self::bad_request("already_closed", e.to_string()),
            RegistryError::RunClosed(_) => Self::bad_request("run_closed", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownRun(_) => Self::new(StatusCode::NOT_FOUND, "unknown_run", e.to_string()),
            StoreError::InvalidRange { .. } => Self::bad_request("invalid_range", e.to_string()),
            StoreError::InvalidBucketCount => Self {
                field: Some("buckets".into()),
                ..Self::bad_request("validation", e.to_string())
            },
            StoreError::EmptyInput => Self::bad_request("empty_input", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<AnalysisError> for ApiError {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::EmptyInput => "empty_input",
            AnalysisError::UnmatchedMarker { .. } => "unmatched_marker",
            AnalysisError::InvalidEpochSpan { .. } => "invalid_epoch_span",
            AnalysisError::OverlappingEpochs { .. } => "overlapping_epochs",
        };
        Self::bad_request(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking registry/store work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn router(state: AppState) -> Router {
    let dashboard = state.registry.data_dir().dashboard_dir();
    let api = Router::new()
        .route("/api/system/now", get(system_now))
        .route("/api/runs", get(list_runs).post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/close", axum::routing::post(close_run))
        .route("/api/runs/{id}/samples", get(samples))
        .route("/api/runs/{id}/markers", get(markers).post(add_marker))
        .route("/api/runs/{id}/summary", get(summary))
        .route("/api/runs/{id}/epochs", get(epochs))
        .route("/api/compare", get(compare))
        .route("/api/live", get(live))
        .with_state(state);
    if dashboard.join("index.html").is_file() {
        api.fallback_service(ServeDir::new(dashboard))
    } else {
        api.route("/", get(|| async { Html(FALLBACK_INDEX) }))
    }
}

async fn system_now(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let config = state.sampler_config.clone();
    let snapshot = blocking(move || {
        read_system_memory(&config, now_unix_ms()).map_err(|e| match e {
            SamplerError::SourceUnavailable(_) => ApiError::internal(e.to_string()),
            other => ApiError::internal(other.to_string()),
        })
    })
    .await?;
    Ok(Json(serde_json::to_value(snapshot).expect("snapshot serializes")))
}

async fn list_runs(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let status = q
        .get("status")
        .map(|s| {
            RunStatus::parse(s)
                .ok_or_else(|| ApiError::field(FieldError::new("status", "expected recording, closed, or aborted")))
        })
        .transpose()?;
    let filter = RunFilter {
        status,
        model_name: q.get("model_name").cloned(),
    };
    let runs = blocking(move || Ok(state.registry.list_runs(&filter)?)).await?;
    Ok(Json(to_json(&runs)))
}

fn parse_object(body: &Bytes) -> ApiResult<serde_json::Map<String, Value>> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(serde_json::Map::new());
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::bad_request("bad_body", "expected a JSON object")),
        Err(e) => Err(ApiError::bad_request("bad_body", format!("invalid JSON: {e}"))),
    }
}

async fn create_run(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let map = parse_object(&body)?;
    let hp = Hyperparameters::from_json_map(&map, &[]).map_err(ApiError::field)?;
    let run = blocking(move || {
        let run = state.registry.create_run(hp, now_unix_ms())?;
        if let Some(r) = &state.recorder {
            r.run_created(&run);
        }
        Ok(run)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(to_json(&run))).into_response())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let run = blocking(move || Ok(state.registry.get(&id)?)).await?;
    Ok(Json(to_json(&run)))
}

async fn close_run(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let map = parse_object(&body)?;
    if let Some(k) = map.keys().find(|k| k.as_str() != "status") {
        return Err(ApiError::field(FieldError::new(k.as_str(), "unknown field")));
    }
    let status = match map.get("status") {
        None | Some(Value::Null) => CloseStatus::Closed,
        Some(Value::String(s)) => CloseStatus::parse(s)
            .ok_or_else(|| ApiError::field(FieldError::new("status", "expected closed or aborted")))?,
        Some(_) => return Err(ApiError::field(FieldError::new("status", "expected a string"))),
    };
    let run = blocking(move || {
        let run = state.registry.close_run(&id, status, now_unix_ms())?;
        if let Some(r) = &state.recorder {
            r.run_closed(&run);
        }
        Ok(run)
    })
    .await?;
    Ok(Json(to_json(&run)))
}

fn query_i64(q: &HashMap<String, String>, name: &str, default: i64) -> ApiResult<i64> {
    match q.get(name) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::field(FieldError::new(name, "expected an integer"))),
    }
}

async fn samples(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let from = query_i64(&q, "from", i64::MIN)?;
    let to = query_i64(&q, "to", i64::MAX)?;
    let buckets = match q.get("buckets") {
        None => None,
        Some(v) => match v.parse::<usize>() {
            Ok(n) if (1..=MAX_BUCKETS).contains(&n) => Some(n),
            _ => {
                return Err(ApiError::field(FieldError::new(
                    "buckets",
                    format!("expected an integer in 1..={MAX_BUCKETS}"),
                )))
            }
        },
    };
    let body = blocking(move || {
        let records = state.store.query_range(&id, from, to)?;
        Ok(match buckets {
            Some(_) if records.is_empty() => "[]".to_owned(),
            Some(n) => serde_json::to_string(&downsample(&records, n)?).expect("buckets serialize"),
            None => samples_json(&records),
        })
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

/// The JSON array body served for raw samples.
pub fn samples_json(records: &[SampleRecord]) -> String {
    serde_json::to_string(records).expect("samples serialize")
}

async fn markers(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let markers = blocking(move || Ok(state.registry.markers(&id)?)).await?;
    Ok(Json(to_json(&markers)))
}

async fn add_marker(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let mut map = parse_object(&body)?;
    if let Some(Value::String(body_id)) = map.get("run_id") {
        if *body_id != id {
            return Err(ApiError::field(FieldError::new("run_id", "does not match the path")));
        }
    }
    map.remove("run_id");
    let marker = Marker::from_json_map(&map, Some(&id), now_unix_ms(), &[]).map_err(ApiError::field)?;
    let stored = marker.clone();
    blocking(move || Ok(state.registry.add_marker(stored)?)).await?;
    Ok((StatusCode::CREATED, Json(to_json(&marker))).into_response())
}

async fn summary(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let summary = blocking(move || {
        state.registry.get(&id)?;
        let samples = state.store.read_all(&id)?;
        Ok(analysis::run_summary(&samples)?)
    })
    .await?;
    Ok(Json(to_json(&summary)))
}

async fn epochs(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let stats = blocking(move || {
        let markers = state.registry.markers(&id)?;
        let samples = state.store.read_all(&id)?;
        Ok(analysis::epoch_breakdown(&samples, &markers)?)
    })
    .await?;
    Ok(Json(to_json(&stats)))
}

async fn compare(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let a = q
        .get("a")
        .cloned()
        .ok_or_else(|| ApiError::field(FieldError::new("a", "missing")))?;
    let b = q
        .get("b")
        .cloned()
        .ok_or_else(|| ApiError::field(FieldError::new("b", "missing")))?;
    let report = blocking(move || {
        let run_a = state.registry.get(&a)?;
        let run_b = state.registry.get(&b)?;
        let samples_a = state.store.read_all(&a)?;
        let samples_b = state.store.read_all(&b)?;
        Ok(analysis::compare_runs((&run_a, &samples_a), (&run_b, &samples_b))?)
    })
    .await?;
    Ok(Json(to_json(&report)))
}

async fn live(State(state): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.hub.subscribe().into_receiver();
    let stream = ReceiverStream::new(rx).map(|frame| {
        let data = serde_json::to_string(&*frame).expect("frame serializes");
        Ok(Event::default().event("sample").data(data))
    });
    Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("response serializes")
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
}

/// A bound, running HTTP server.
pub struct ServerHandle {
    local_addr: SocketAddr,
    hub: Arc<LiveHub>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Ends live streams and waits for in-flight requests to finish.
    pub async fn shutdown(mut self) {
        self.hub.close();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }
}

/// Binds `addr` and serves the API on the current tokio runtime.
pub async fn http_api(addr: SocketAddr, state: AppState) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::BindFailure { addr, source })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| ServerError::BindFailure { addr, source })?;
    let hub = Arc::clone(&state.hub);
    let app = router(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let result = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        if let Err(e) = result {
            tracing::error!("http server failed: {e}");
        }
    });
    Ok(ServerHandle {
        local_addr,
        hub,
        shutdown: Some(tx),
        task,
    })
}
