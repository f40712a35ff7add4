//! HTTP API for the human-labeling UI.
//!
//! ```text
//! GET  /api/queries/next        200 {id, task, question, frames_a, frames_b} | 204
//! POST /api/queries/{id}/label  body {"label": 0|1|2}  200 | 400 | 404 | 409
//! GET  /api/status              200 {pending, labeled}
//! ```
//!
//! Everything else is served from the UI bundle directory when one is
//! configured. With a token configured every `/api` request must carry it in
//! the `x-label-token` header (401 otherwise).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use crate::critic::{HumanQueue, Label, QueueError};
use crate::env::SceneGraph;

pub const TOKEN_HEADER: &str = "x-label-token";

#[derive(Clone)]
pub struct AppState {
    pub queue: Arc<HumanQueue>,
    pub token: Option<String>,
}

/// Body of `GET /api/queries/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub id: String,
    pub task: String,
    pub question: String,
    pub frames_a: Vec<SceneGraph>,
    pub frames_b: Vec<SceneGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBody {
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAccepted {
    pub id: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ApiError { error: msg.into() })).into_response()
}

async fn next_query(State(st): State<AppState>) -> Response {
    match st.queue.next_for_labeling() {
        Some(q) => {
            let (frames_a, frames_b) = q.frames();
            Json(QueryView {
                id: q.id,
                task: q.task.name().to_string(),
                question: q.question,
                frames_a,
                frames_b,
            })
            .into_response()
        }
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let parsed: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let label = match Label::try_from(parsed.label) {
        Ok(l) => l,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    // submit_label fsyncs, keep it off the async workers
    let queue = st.queue.clone();
    let res = tokio::task::spawn_blocking(move || queue.submit_label(&id, label)).await;
    match res {
        Ok(Ok(v)) => Json(LabelAccepted {
            id: v.query_id,
            label: v.label.as_u8(),
        })
        .into_response(),
        Ok(Err(e @ QueueError::UnknownQuery(_))) => error(StatusCode::NOT_FOUND, e.to_string()),
        Ok(Err(e @ QueueError::AlreadyLabeled { .. })) => error(StatusCode::CONFLICT, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn status(State(st): State<AppState>) -> Response {
    Json(st.queue.status()).into_response()
}

async fn check_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &st.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong label token");
        }
    }
    next.run(req).await
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queries/next", get(next_query))
        .route("/api/queries/{id}/label", post(submit))
        .route("/api/status", get(status))
        .route_layer(middleware::from_fn_with_state(state.clone(), check_token))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// A service running on its own runtime thread. Dropping the handle stops it.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn_service(addr: &str, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<ServiceHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state, ui_dir);
    let thread = std::thread::Builder::new()
        .name("label-service".into())
        .spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("label service: {e}");
                        return;
                    }
                };
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    tracing::error!("label service: {e}");
                }
            });
        })?;
    tracing::info!(%local, "label service listening");
    Ok(ServiceHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves on the calling thread until ctrl-c.
pub fn serve_until_interrupt(addr: &str, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "label service listening");
        axum::serve(listener, router(state, ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
