//! HTTP inference endpoint serving one checkpoint.
//!
//! Routes: `GET /healthz` answers `ok`; `POST /predict?cam=0|1` takes PNG or
//! JPEG bytes and answers with a [`PredictionResponse`] as JSON.

mod predict;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dermresnet::checkpoint::{self, CheckpointError};
use dermresnet::model::Model;
use serde_json::json;
use thiserror::Error;

pub use predict::{decode_and_resize, predict_bytes, PredictError, PredictionResponse, OVERLAY_ALPHA, THRESHOLD};

pub const MAX_BODY_ENV: &str = "DERM_MAX_BODY_BYTES";
pub const DEFAULT_MAX_BODY_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid {MAX_BODY_ENV} value {0:?}")]
    BodyLimit(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceConfig {
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
        }
    }
}

impl ServiceConfig {
    /// Defaults, with the body limit taken from `DERM_MAX_BODY_BYTES` if set.
    pub fn from_env() -> Result<Self, ServiceError> {
        match std::env::var(MAX_BODY_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map(|max_body_bytes| Self { max_body_bytes })
                .map_err(|_| ServiceError::BodyLimit(v)),
            Err(_) => Ok(Self::default()),
        }
    }
}

/// Shared read-only model plus the request counter.
#[derive(Debug)]
pub struct AppState {
    model: Arc<Model>,
    model_version: String,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, crc: u32) -> Self {
        Self {
            model: Arc::new(model),
            model_version: checkpoint::model_version(crc),
            requests: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    /// `/predict` requests received so far.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

pub fn router(state: Arc<AppState>, cfg: ServiceConfig) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/predict", post(handle_predict))
        .layer(DefaultBodyLimit::max(cfg.max_body_bytes))
        .with_state(state)
}

async fn healthz() -> &'static str {
    "ok"
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn parse_cam(query: Option<&str>) -> Result<bool, String> {
    let mut cam = false;
    for pair in query.unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("cam", "0")) => cam = false,
            Some(("cam", "1")) => cam = true,
            Some(("cam", other)) => return Err(format!("cam must be 0 or 1, got {other:?}")),
            _ => {}
        }
    }
    Ok(cam)
}

async fn handle_predict(State(state): State<Arc<AppState>>, RawQuery(query): RawQuery, body: Bytes) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let cam = match parse_cam(query.as_deref()) {
        Ok(c) => c,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    let worker = Arc::clone(&state);
    let outcome =
        tokio::task::spawn_blocking(move || predict_bytes(&worker.model, &worker.model_version, &body, cam)).await;
    match outcome {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(PredictError::Decode(msg))) => error(StatusCode::BAD_REQUEST, msg),
        Ok(Err(_)) | Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal error"),
    }
}

/// Load the checkpoint once and build the router around it.
pub fn app_from_checkpoint(path: &Path, cfg: ServiceConfig) -> Result<(Router, Arc<AppState>), ServiceError> {
    let (model, crc) = checkpoint::load_with_crc(path)?;
    let state = Arc::new(AppState::new(model, crc));
    Ok((router(Arc::clone(&state), cfg), state))
}

/// Serve until Ctrl-C. The checkpoint is validated before the socket is
/// bound; `on_ready` receives the bound address and the model version.
pub async fn serve(
    checkpoint_path: &Path,
    bind: &str,
    cfg: ServiceConfig,
    on_ready: impl FnOnce(SocketAddr, &str),
) -> Result<(), ServiceError> {
    let (app, state) = app_from_checkpoint(checkpoint_path, cfg)?;
    let bind_err = |source| ServiceError::Bind {
        addr: bind.to_string(),
        source,
    };
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(bind_err)?;
    on_ready(listener.local_addr().map_err(bind_err)?, state.model_version());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Server)
}
