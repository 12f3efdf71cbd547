//! HTTP front end of the annotation queue.
//!
//! ```text
//! GET  /api/candidate/next?annotator=ID   200 candidate, 204 when none is left
//! POST /api/decision                      200 recorded|duplicate, 400, 404, 409
//! GET  /api/stats                         progress and discard statistics
//! GET  /api/export[?format=jsonl]         kept triplets with their chosen text
//! GET  /frames/<video_id>/<index>.jpg     frame images from the frames directory
//! ```
//!
//! Queue state and the decision log sit behind one lock, so lease
//! acquisition and decision writes are linearizable. A decision reaches the
//! log before the queue accepts it.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use covr_forge::annotate::{
    read_decision_log, AnnotateError, AnnotationCandidate, AnnotationDecision, AnnotationQueue, DecisionLog,
    DiscardReason, SubmitOutcome, Verdict,
};
use covr_forge::jsonl::read_jsonl;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("candidate pool {}: {source}", path.display())]
    Pool { path: PathBuf, source: AnnotateError },
    #[error("decision log {}: {source}", path.display())]
    Log { path: PathBuf, source: AnnotateError },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub pool: PathBuf,
    pub log: PathBuf,
    pub lease_seconds: i64,
    pub frames_dir: Option<PathBuf>,
}

struct Inner {
    queue: AnnotationQueue,
    log: DecisionLog,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    clock: Clock,
}

impl AppState {
    /// Load the pool and replay any existing decisions from the log.
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        Self::open_with_clock(cfg, Arc::new(Utc::now))
    }

    pub fn open_with_clock(cfg: &ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        let pool_err = |source: AnnotateError| ServiceError::Pool { path: cfg.pool.clone(), source };
        let log_err = |source: AnnotateError| ServiceError::Log { path: cfg.log.clone(), source };
        let candidates: Vec<AnnotationCandidate> =
            read_jsonl(&cfg.pool).map_err(|e| pool_err(AnnotateError::from(e)))?;
        let past = read_decision_log(&cfg.log).map_err(log_err)?;
        let n_past = past.len();
        let queue = AnnotationQueue::replay(candidates, Duration::seconds(cfg.lease_seconds), past).map_err(log_err)?;
        let log = DecisionLog::open(&cfg.log).map_err(log_err)?;
        log::info!("{} candidate(s), {n_past} logged decision(s) replayed", queue.len());
        Ok(AppState { inner: Arc::new(Mutex::new(Inner { queue, log })), clock })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // a panic mid-request cannot leave the queue half-updated: every
        // mutation is a single insert after the log write
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameUrls {
    pub query: Vec<String>,
    pub target: Vec<String>,
}

/// Response of `/api/candidate/next`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub candidate: AnnotationCandidate,
    pub frame_urls: FrameUrls,
    pub lease_expires: Option<DateTime<Utc>>,
}

/// Body of `POST /api/decision`. The server stamps decisions that arrive
/// without a timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub candidate_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub chosen_index: Option<usize>,
    pub annotator: String,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub discard_reason: Option<DiscardReason>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub status: SubmitOutcome,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

fn error(status: StatusCode, kind: &str, message: impl ToString) -> Response {
    (status, Json(ErrorBody { error: kind.to_owned(), message: message.to_string() })).into_response()
}

fn annotate_error(e: AnnotateError) -> Response {
    match &e {
        AnnotateError::UnknownCandidate(_) => error(StatusCode::NOT_FOUND, "unknown_candidate", e),
        AnnotateError::Conflict(_) => error(StatusCode::CONFLICT, "conflict", e),
        AnnotateError::LeasedToOther(_) => error(StatusCode::CONFLICT, "leased_to_other", e),
        AnnotateError::Invalid(_) => error(StatusCode::BAD_REQUEST, "invalid", e),
        _ => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

#[derive(Debug, Deserialize)]
struct NextParams {
    annotator: Option<String>,
}

async fn next_candidate(State(st): State<AppState>, Query(params): Query<NextParams>) -> Response {
    let Some(annotator) = params.annotator.filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "invalid", "annotator query parameter is required");
    };
    let now = (st.clock)();
    let mut inner = st.lock();
    let Some(c) = inner.queue.next_candidate(&annotator, now).cloned() else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let urls = |refs: &[covr_forge::annotate::FrameRef]| refs.iter().map(|r| r.url()).collect();
    let view = CandidateView {
        frame_urls: FrameUrls { query: urls(&c.frame_refs.query), target: urls(&c.frame_refs.target) },
        lease_expires: inner.queue.lease_expiry(&c.candidate_id, now),
        candidate: c,
    };
    Json(view).into_response()
}

async fn submit_decision(State(st): State<AppState>, body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid", e.body_text()),
    };
    let now = (st.clock)();
    let decision = AnnotationDecision {
        candidate_id: body.candidate_id,
        verdict: body.verdict,
        chosen_index: body.chosen_index,
        annotator: body.annotator,
        timestamp: body.timestamp.unwrap_or(now),
        discard_reason: body.discard_reason,
    };
    let mut inner = st.lock();
    let outcome = match inner.queue.check_submit(&decision, now) {
        Ok(o) => o,
        Err(e) => return annotate_error(e),
    };
    if outcome == SubmitOutcome::Recorded {
        if let Err(e) = inner.log.append(&decision) {
            log::error!("decision log write failed: {e}");
            return error(StatusCode::INTERNAL_SERVER_ERROR, "log_write", e);
        }
        inner.queue.submit(decision, now).expect("checked above");
    }
    Json(SubmitResponse { status: outcome }).into_response()
}

async fn stats(State(st): State<AppState>) -> Response {
    let now = (st.clock)();
    Json(st.lock().queue.stats(now)).into_response()
}

#[derive(Debug, Deserialize)]
struct ExportParams {
    format: Option<String>,
}

async fn export(State(st): State<AppState>, Query(params): Query<ExportParams>) -> Response {
    let now = (st.clock)();
    let export = st.lock().queue.export(now);
    match params.format.as_deref() {
        None | Some("json") => Json(export).into_response(),
        Some("jsonl") => {
            let mut body = String::new();
            for t in &export.triplets {
                body.push_str(&serde_json::to_string(t).expect("triplet serializes"));
                body.push('\n');
            }
            ([(axum::http::header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
        }
        Some(other) => error(StatusCode::BAD_REQUEST, "invalid", format!("unknown format {other:?}")),
    }
}

pub fn router(state: AppState, frames_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/candidate/next", get(next_candidate))
        .route("/api/decision", post(submit_decision))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .with_state(state);
    match frames_dir {
        Some(dir) => api.nest_service("/frames", tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serve on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    cfg: &ServiceConfig,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(state, cfg.frames_dir.as_deref());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Blocking entry point: bind `port` on all interfaces and serve until
/// Ctrl-C.
pub fn run(cfg: &ServiceConfig, port: u16) -> Result<(), ServiceError> {
    let state = AppState::open(cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = SocketAddr::from(([0, 0, 0, 0], port));
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
        log::info!("annotation service on http://{}", listener.local_addr()?);
        serve_on(listener, cfg, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}
