//! Embedded HTTP service: read-only views of a run, the request queue, and
//! the two operator commands (decide a request, release a paused barrier).
//!
//! Every response is an envelope: `{"data": ...}` on success or
//! `{"error": {"code": ..., "message": ...}}` otherwise. When a token is
//! configured every route requires `Authorization: Bearer <token>`; the
//! event stream also accepts `?token=` because browser event sources cannot
//! set headers.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_stream::wrappers::BroadcastStream;

use crate::evolution::monitor::{RunEvent, RunMonitor, RunPhase};
use crate::hitl::{Decision, HitlError, HitlQueue, RequestStatus};
use crate::memory::Ledger;

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "CODEVOLVE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
}

/// Exactly one of `data` and `error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEnvelope<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiErrorBody>,
}

pub struct ServiceState {
    pub monitor: Arc<RunMonitor>,
    pub queue: Arc<HitlQueue>,
    pub ledger: Arc<Ledger>,
    pub token: Option<String>,
    pub memory_context_limit: usize,
}

type Shared = Arc<ServiceState>;

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body: ApiEnvelope<()> =
            ApiEnvelope { data: None, error: Some(ApiErrorBody { code: self.1.into(), message: self.2 }) };
        (self.0, Json(body)).into_response()
    }
}

fn ok<T: Serialize>(data: T) -> Response {
    Json(ApiEnvelope { data: Some(data), error: None }).into_response()
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "bad_request", message.into())
}

async fn auth(State(state): State<Shared>, request: Request, next: Next) -> Response {
    let Some(expected) = state.token.as_deref() else { return next.run(request).await };
    let header_ok = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == expected);
    let query_ok = request.uri().path() == "/api/events"
        && request
            .uri()
            .query()
            .is_some_and(|q| q.split('&').any(|kv| kv.strip_prefix("token=").is_some_and(|t| t == expected)));
    if header_ok || query_ok {
        next.run(request).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token".into()).into_response()
    }
}

async fn get_run(State(state): State<Shared>) -> Response {
    let snap = state.monitor.snapshot();
    ok(json!({
        "phase": snap.phase,
        "current_generation": snap.current_generation,
        "pending_requests": state.queue.pending_count(),
        "report": snap.report,
    }))
}

async fn get_generations(State(state): State<Shared>) -> Response {
    ok(state.monitor.snapshot().generations)
}

async fn get_agents(State(state): State<Shared>, Path(g): Path<String>) -> Result<Response, ApiError> {
    let g: u32 = g.parse().map_err(|_| bad_request(format!("generation `{g}` is not a number")))?;
    let snap = state.monitor.snapshot();
    let agents = snap
        .agents
        .get(&g)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "not_found", format!("generation {g} has no results yet")))?;
    Ok(ok(agents))
}

#[derive(Deserialize)]
struct MemoryQuery {
    path: Option<String>,
    limit: Option<String>,
}

async fn get_memory(State(state): State<Shared>, Query(q): Query<MemoryQuery>) -> Result<Response, ApiError> {
    let path = q.path.filter(|p| !p.is_empty()).ok_or_else(|| bad_request("query parameter `path` is required"))?;
    let limit = match q.limit {
        Some(l) => l.parse().map_err(|_| bad_request(format!("limit `{l}` is not a non-negative integer")))?,
        None => state.memory_context_limit,
    };
    Ok(ok(state.ledger.query_context(std::path::Path::new(&path), limit)))
}

#[derive(Deserialize)]
struct RequestsQuery {
    status: Option<String>,
}

async fn get_requests(State(state): State<Shared>, Query(q): Query<RequestsQuery>) -> Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(s) => Some(s.parse::<RequestStatus>().map_err(|_| bad_request(format!("unknown status `{s}`")))?),
    };
    Ok(ok(state.queue.list(status)))
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: Decision,
    #[serde(default)]
    note: String,
}

async fn post_decision(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(|e| bad_request(e.body_text()))?;
    let queue = state.queue.clone();
    let result = tokio::task::spawn_blocking(move || queue.resolve(&id, body.decision, &body.note))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(request) => {
            state.monitor.emit(RunEvent::RequestDecided { request: request.clone() });
            Ok(ok(request))
        }
        Err(e @ HitlError::UnknownRequest(_)) => Err(ApiError(StatusCode::NOT_FOUND, "not_found", e.to_string())),
        Err(e @ HitlError::AlreadyDecided(_)) => Err(ApiError(StatusCode::CONFLICT, "already_decided", e.to_string())),
        Err(e @ HitlError::MissingNote) => Err(ApiError(StatusCode::BAD_REQUEST, "missing_note", e.to_string())),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())),
    }
}

async fn post_proceed(State(state): State<Shared>) -> Response {
    let paused = state.monitor.snapshot().phase == RunPhase::Paused;
    state.queue.proceed();
    ok(json!({ "released": paused }))
}

async fn get_events(State(state): State<Shared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(state.monitor.subscribe()).filter_map(|item| async move {
        match item {
            Ok(event) => {
                let data: Value = serde_json::to_value(&event).unwrap_or(Value::Null);
                Some(Ok(Event::default().event(event.name()).data(data.to_string())))
            }
            // A slow client missed events; it can resynchronize over GET.
            Err(_) => Some(Ok(Event::default().event("lagged").data("{}"))),
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "not_found", "no such endpoint".into())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/run", get(get_run))
        .route("/api/generations", get(get_generations))
        .route("/api/generations/{g}/agents", get(get_agents))
        .route("/api/memory", get(get_memory))
        .route("/api/requests", get(get_requests))
        .route("/api/requests/{id}/decision", post(post_decision))
        .route("/api/control/proceed", post(post_proceed))
        .route("/api/events", get(get_events))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot start the service runtime: {0}")]
    Runtime(std::io::Error),
}

/// A running service; dropping it stops the server.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` and serves on a dedicated runtime thread.
pub fn serve(state: ServiceState, addr: &str) -> Result<ServiceHandle, ServiceError> {
    let listener =
        std::net::TcpListener::bind(addr).map_err(|source| ServiceError::Bind { addr: addr.to_string(), source })?;
    listener.set_nonblocking(true).map_err(ServiceError::Runtime)?;
    let local = listener.local_addr().map_err(ServiceError::Runtime)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(ServiceError::Runtime)?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(Arc::new(state));
    let thread = std::thread::Builder::new()
        .name("codevolve-service".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("service listener: {e}");
                        return;
                    }
                };
                tokio::select! {
                    r = axum::serve(listener, app) => {
                        if let Err(e) = r {
                            log::error!("service stopped: {e}");
                        }
                    }
                    _ = rx => {}
                }
            });
            // Open event streams are cancelled rather than awaited.
            runtime.shutdown_timeout(std::time::Duration::from_secs(1));
        })
        .map_err(ServiceError::Runtime)?;
    log::info!("service listening on http://{local}");
    Ok(ServiceHandle { addr: local, stop: Some(tx), thread: Some(thread) })
}

