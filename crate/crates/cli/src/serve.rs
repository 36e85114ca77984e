//! HTTP annotation service running next to a wall-clock scenario.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::Notify;
use tower_http::services::ServeDir;

use cspflow::crowd::{CrowdBridge, CrowdError};
use cspflow::harness::api::{error_body, status_for, LabelRequest, LabelResponse, NextTaskResponse, StatsResponse};
use cspflow::harness::{outcome_of, prepare, AidrEnv, ScenarioConfig, ScenarioOutcome, SharedBoard};
use cspflow::runtime::{RunSummary, StopHandle, WallClockOptions, WallClockRuntime};
use cspflow::WorkerId;

/// How long a request waits for the annotator element to pick it up.
const BRIDGE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone)]
struct AppState {
    bridge: CrowdBridge,
    board: SharedBoard,
}

struct ApiError(CrowdError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(status_for(&self.0)).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = error_body(&self.0);
        let retry = body.retry_after_s;
        let mut resp = (status, Json(body)).into_response();
        if let Some(s) = retry {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        resp
    }
}

#[derive(Deserialize)]
struct NextQuery {
    worker_id: String,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CrowdError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or(Err(CrowdError::Disconnected))
        .map_err(ApiError)
}

async fn next_task(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Result<Json<NextTaskResponse>, ApiError> {
    let task = blocking(move || s.bridge.next_task(&WorkerId::new(q.worker_id))).await?;
    Ok(Json(NextTaskResponse::from(&task)))
}

async fn submit_label(
    State(s): State<AppState>,
    UrlPath(task_id): UrlPath<u64>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelResponse>, ApiError> {
    let ack = blocking(move || {
        s.bridge
            .submit(task_id, &WorkerId::new(req.worker_id), req.answer, req.client_latency_ms)
    })
    .await?;
    Ok(Json(ack.into()))
}

async fn stats(State(s): State<AppState>) -> Json<StatsResponse> {
    let b = s.board.lock().expect("board");
    Json(StatsResponse {
        labels_total: b.labels_total,
        tasks_open: b.tasks_open,
        auc_latest: b.auc_latest,
        model_version: b.model_version,
        throughput_now: b.throughput_now(),
    })
}

async fn health() -> &'static str {
    "ok"
}

fn router(bridge: CrowdBridge, board: SharedBoard, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{task_id}/label", post(submit_label))
        .route("/api/stats", get(stats))
        .with_state(AppState { bridge, board });
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// A scenario running in wall-clock mode with the annotation API in front
/// of its crowd element.
pub struct Service {
    pub addr: SocketAddr,
    cfg: ScenarioConfig,
    env: Arc<AidrEnv>,
    stop: StopHandle,
    done: Arc<Notify>,
    runtime: JoinHandle<RunSummary>,
    server: JoinHandle<Result<()>>,
}

pub struct ServeOptions {
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
    /// End the service on Ctrl-C.
    pub handle_ctrl_c: bool,
}

pub fn start(cfg: &ScenarioConfig, base: &Path, opts: ServeOptions) -> Result<Service> {
    let (bridge, rx) = CrowdBridge::channel(BRIDGE_TIMEOUT);
    let prepared = prepare(cfg, base, Some(rx))?;
    let wall = WallClockOptions {
        time_scale: cfg.time_scale,
        max_duration: cfg.max_time_s.map(|s| Duration::from_secs_f64(s * cfg.time_scale)),
        ..WallClockOptions::default()
    };
    let rt = WallClockRuntime::new(&prepared.topology, &prepared.registry, wall)?;
    let stop = rt.stop_handle();
    let done = Arc::new(Notify::new());

    let listener = TcpListener::bind(opts.addr).with_context(|| format!("binding {}", opts.addr))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let app = router(bridge, prepared.env.board.clone(), opts.static_dir.as_deref());

    let notify = done.clone();
    let runtime = thread::Builder::new().name("scenario".into()).spawn(move || {
        let summary = rt.run();
        notify.notify_one();
        summary
    })?;
    let notify = done.clone();
    let ctrl_c = opts.handle_ctrl_c;
    let server = thread::Builder::new().name("http".into()).spawn(move || -> Result<()> {
        let tokio_rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        tokio_rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            let shutdown = async move {
                if ctrl_c {
                    tokio::select! {
                        _ = notify.notified() => {}
                        _ = tokio::signal::ctrl_c() => log::info!("interrupted"),
                    }
                } else {
                    notify.notified().await;
                }
            };
            axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
            Ok(())
        })
    })?;
    log::info!("annotation service listening on http://{addr}");
    Ok(Service {
        addr,
        cfg: cfg.clone(),
        env: prepared.env,
        stop,
        done,
        runtime,
        server,
    })
}

impl Service {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Blocks until the scenario ends or the server is interrupted.
    pub fn wait(self) -> Result<ScenarioOutcome> {
        let server = self.server.join().map_err(|_| anyhow::anyhow!("http thread panicked"))?;
        self.stop.stop();
        let summary = self.runtime.join().map_err(|_| anyhow::anyhow!("scenario thread panicked"))?;
        server?;
        Ok(outcome_of(summary, &self.cfg, self.env))
    }

    /// Stops both the scenario and the server.
    pub fn shutdown(self) -> Result<ScenarioOutcome> {
        self.done.notify_one();
        self.wait()
    }
}
