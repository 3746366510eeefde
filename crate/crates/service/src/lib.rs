//! HTTP service for publishing experiment packages and ingesting chunks.

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use uuid::Uuid;

pub use store::{ExperimentEntry, Ingest, ServerStore, StoreError};

const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub root: PathBuf,
    pub token: String,
    pub quota_bytes: Option<u64>,
}

struct AppState {
    store: ServerStore,
    token: String,
}

type Shared = Arc<AppState>;

pub fn router(store: ServerStore, token: String) -> Router {
    let state = Arc::new(AppState { store, token });
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/experiments", get(list_experiments).post(publish))
        .route("/v1/experiments/{id}", get(download))
        .route("/v1/data/{experiment}/{device}/{chunk}", post(upload))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StoreError::Duplicate(_) => StatusCode::CONFLICT,
            StoreError::NotFound => StatusCode::NOT_FOUND,
            StoreError::Full => StatusCode::INSUFFICIENT_STORAGE,
            StoreError::Io(e) => {
                tracing::error!(error = %e, "store failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        error(status, self)
    }
}

fn authorized(state: &AppState, headers: &HeaderMap) -> bool {
    let Some(given) = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
    else {
        return false;
    };
    let (a, b) = (given.as_bytes(), state.token.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StoreError> + Send + 'static,
) -> Result<T, StoreError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StoreError::Io(std::io::Error::other(e)))?
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "chunks_stored": state.store.chunks_stored(),
        "experiments_published": state.store.experiments_published(),
    }))
}

async fn list_experiments(State(state): State<Shared>) -> Json<Vec<ExperimentEntry>> {
    Json(state.store.list_experiments())
}

async fn download(State(state): State<Shared>, Path(id): Path<String>) -> Response {
    let Ok(id) = Uuid::parse_str(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown experiment");
    };
    match blocking(move || state.store.package(id)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/zip")], bytes).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn publish(State(state): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    if !authorized(&state, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
    }
    let st = state.clone();
    match blocking(move || st.store.publish(&body)).await {
        Ok(entry) => (StatusCode::CREATED, Json(entry)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn upload(
    State(state): State<Shared>,
    Path((experiment, device, chunk)): Path<(String, String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if !authorized(&state, &headers) {
        return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
    }
    let ids = (
        Uuid::parse_str(&experiment),
        Uuid::parse_str(&device),
        Uuid::parse_str(&chunk),
    );
    let (Ok(experiment), Ok(device), Ok(chunk)) = ids else {
        return error(StatusCode::BAD_REQUEST, "path ids must be UUIDs");
    };
    let st = state.clone();
    match blocking(move || st.store.ingest(experiment, device, chunk, &body)).await {
        Ok(outcome) => Json(json!({
            "chunk_id": chunk,
            "duplicate": outcome == Ingest::Duplicate,
        }))
        .into_response(),
        Err(e) => e.into_response(),
    }
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    config: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let store = ServerStore::open(&config.root, config.quota_bytes)?;
    serve_router(listener, router(store, config.token), shutdown).await
}

async fn serve_router(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// A server running on its own runtime thread, for tests and embedding.
pub struct RunningServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<anyhow::Result<()>>>,
}

impl RunningServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and start serving.
    pub fn start(config: ServiceConfig, addr: &str) -> anyhow::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let local = listener.local_addr()?;
        let app = router(
            ServerStore::open(&config.root, config.quota_bytes)?,
            config.token,
        );
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(serve_router(listener, app, async {
                let _ = rx.await;
            }))
        });
        Ok(RunningServer {
            addr: local,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> anyhow::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> anyhow::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| anyhow::anyhow!("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
