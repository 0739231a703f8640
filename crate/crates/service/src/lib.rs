//! Local HTTP service around the solver.
//!
//! `POST /api/solve` answers with a [`SolveResponse`], or with an event
//! stream when the request sets `stream`. `GET /api/solve/stream` takes the
//! same request as flat query parameters and always streams: one `progress`
//! event per history record, then a `final` event carrying the response, or
//! an `error` event. `GET /api/health` reports cache and load counters.

use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use holomask_api::{
    ErrorBody, Health, RequestError, SolveRequest, SolveResponse, StreamQuery, EVENT_ERROR, EVENT_FINAL,
    EVENT_PROGRESS, MAX_SIDE,
};
use holomask_core::pipeline::{run_job, run_job_observed, Job, JobOutput};
use holomask_core::transform::PlanCache;
use holomask_core::{ConvergenceRecord, Error as CoreError, StopReason};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinHandle;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_PORT: u16 = 7878;

/// Progress events buffered per stream before the solver waits for the client.
const STREAM_BUFFER: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Latency budget the responses are flagged against; never enforced.
    pub budget_ms: f64,
    /// Solves running at once; further requests wait for a slot.
    pub max_concurrent: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            budget_ms: holomask_api::DEFAULT_BUDGET_MS,
            max_concurrent: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            // A base64 16-bit image of the largest grid, plus slack.
            max_body_bytes: (MAX_SIDE * MAX_SIDE * 2) * 4 / 3 + (1 << 20),
        }
    }
}

/// State shared by all handlers.
pub struct AppState {
    config: ServiceConfig,
    plans: Arc<PlanCache>,
    slots: Arc<Semaphore>,
    solves_completed: AtomicU64,
    active_streams: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            slots: Arc::new(Semaphore::new(config.max_concurrent.max(1))),
            config,
            plans: Arc::new(PlanCache::new()),
            solves_completed: AtomicU64::new(0),
            active_streams: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            plan_cache: self.plans.stats(),
            solves_completed: self.solves_completed.load(Ordering::Relaxed),
            active_streams: self.active_streams.load(Ordering::Relaxed),
            budget_ms: self.config.budget_ms,
        }
    }
}

/// Counts a streaming solve from request acceptance until its worker exits.
struct StreamGuard(Arc<AppState>);

impl StreamGuard {
    fn new(state: &Arc<AppState>) -> Self {
        state.active_streams.fetch_add(1, Ordering::Relaxed);
        StreamGuard(state.clone())
    }
}

impl Drop for StreamGuard {
    fn drop(&mut self) {
        self.0.active_streams.fetch_sub(1, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("internal error: {message}"))
    }

    fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.message.clone(),
            status: self.status.as_u16(),
        }
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::BAD_REQUEST);
        ApiError::new(status, e.to_string())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Degenerate(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            e => ApiError::internal(e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| is_local_origin(origin)))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/solve", post(solve))
        .route("/api/solve/stream", get(solve_stream))
        .route("/api/health", get(health))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(state.config.max_body_bytes))
        .layer(cors)
        .with_state(state)
}

/// Browser pages served from this machine, on any port.
pub fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(origin) = origin.to_str() else {
        return false;
    };
    let Some(rest) = origin.strip_prefix("http://").or_else(|| origin.strip_prefix("https://")) else {
        return false;
    };
    let (host, port) = match rest.rfind(':') {
        Some(i) if !rest[i..].contains(']') => (&rest[..i], Some(&rest[i + 1..])),
        _ => (rest, None),
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]") && port.is_none_or(|p| p.parse::<u16>().is_ok())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

async fn solve(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(body) => body,
        Err(e) => return ApiError::new(e.status(), e.body_text()).into_response(),
    };
    let req = match SolveRequest::from_json(&body) {
        Ok(req) => req,
        Err(e) => return ApiError::from(e).into_response(),
    };
    if req.stream {
        return stream(state, req).await.into_response();
    }
    solve_once(state, req).await.map(Json).into_response()
}

async fn solve_stream(
    State(state): State<Arc<AppState>>,
    query: Result<Query<StreamQuery>, QueryRejection>,
) -> Response {
    let req = query
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
        .and_then(|Query(q)| q.to_request().map_err(ApiError::from));
    match req {
        Ok(req) => stream(state, req).await.into_response(),
        Err(e) => e.into_response(),
    }
}

struct Prepared {
    job: Job,
    decode: Duration,
    req: SolveRequest,
    permit: OwnedSemaphorePermit,
}

/// Waits for a solve slot, then builds the job off the async workers.
async fn prepare(state: &Arc<AppState>, req: SolveRequest) -> Result<Prepared, ApiError> {
    let permit = state.slots.clone().acquire_owned().await.map_err(ApiError::internal)?;
    let (job, decode, req) = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        req.to_job().map(|job| (job, start.elapsed(), req))
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Prepared {
        job,
        decode,
        req,
        permit,
    })
}

fn respond(state: &AppState, p: &Prepared, out: &JobOutput) -> Result<SolveResponse, ApiError> {
    let resp = SolveResponse::from_output(out, p.req.strategy, p.decode, state.config.budget_ms)?;
    state.solves_completed.fetch_add(1, Ordering::Relaxed);
    Ok(resp)
}

async fn solve_once(state: Arc<AppState>, req: SolveRequest) -> Result<SolveResponse, ApiError> {
    let p = prepare(&state, req).await?;
    tokio::task::spawn_blocking(move || {
        let out = run_job(&p.job, &state.plans)?;
        let resp = respond(&state, &p, &out);
        drop(p.permit);
        resp
    })
    .await
    .map_err(ApiError::internal)?
}

enum Update {
    Progress(ConvergenceRecord),
    Done(Result<Box<SolveResponse>, ApiError>),
}

impl Update {
    fn event(self) -> Event {
        let event = match self {
            Update::Progress(rec) => Event::default()
                .event(EVENT_PROGRESS)
                .id(rec.iter.to_string())
                .json_data(rec),
            Update::Done(Ok(resp)) => Event::default().event(EVENT_FINAL).json_data(resp),
            Update::Done(Err(e)) => Event::default().event(EVENT_ERROR).json_data(e.body()),
        };
        event.unwrap_or_else(|e| Event::default().event(EVENT_ERROR).data(e.to_string()))
    }
}

/// Validation failures answer with a plain HTTP error; once the stream has
/// started, failures arrive as an `error` event. A client that goes away
/// stops the solve at its next record.
async fn stream(
    state: Arc<AppState>,
    req: SolveRequest,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let guard = StreamGuard::new(&state);
    let p = prepare(&state, req).await?;
    let (tx, rx) = mpsc::channel(STREAM_BUFFER);
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let run = run_job_observed(&p.job, &state.plans, |rec| match tx.blocking_send(Update::Progress(*rec)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(_) => ControlFlow::Break(()),
        });
        let done = match run {
            Ok(out) if out.stop_reason == StopReason::Cancelled => {
                tracing::info!(iters = out.iters_run, "stream client disconnected, solve aborted");
                return;
            }
            Ok(out) => respond(&state, &p, &out).map(Box::new),
            Err(e) => Err(ApiError::from(e)),
        };
        if let Err(e) = &done {
            tracing::warn!(status = e.status.as_u16(), "streamed solve failed: {}", e.message);
        }
        let _ = tx.blocking_send(Update::Done(done));
    });
    let events = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|u| (Ok(u.event()), rx))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A service running on a background task.
pub struct Running {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Running {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.map_err(std::io::Error::other)?
    }
}

/// Binds `config.bind` (port 0 picks a free one) and serves in the background.
pub async fn spawn(config: ServiceConfig) -> std::io::Result<Running> {
    let listener = TcpListener::bind(config.bind).await?;
    let addr = listener.local_addr()?;
    let state = AppState::new(config);
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(serve(listener, state.clone(), async {
        let _ = stopped.await;
    }));
    tracing::info!(%addr, "listening");
    Ok(Running {
        addr,
        state,
        stop: Some(stop),
        task,
    })
}
