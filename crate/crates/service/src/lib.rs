//! Local HTTP API over a trained checkpoint.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/api/meta` | | manifest, `cond_dim`, samplers, encoders (409 before a checkpoint is loaded) |
//! | POST | `/api/checkpoint` | `{path}` | same as `/api/meta` |
//! | POST | `/api/generate` | `{condition, sampler?, steps?, seed?}` | PNG, final vector in `x-rcdm-vector` |
//! | POST | `/api/embeddings` | raw RCDE bytes | `{matrix_id, n, d, attributes}` |
//! | GET | `/api/embeddings/{id}` | | `{matrix_id, n, d, attributes}` |
//! | GET | `/api/embeddings/{id}/rows/{row}` | | `{values, labels}` |
//! | POST | `/api/directions/pca` | `{matrix_id, K}` | `{bank_id, explained_variances}` |
//! | GET | `/api/directions/{id}` | | bank JSON |
//! | POST | `/api/reference` | `{matrix_id, row}`, `{image, encoder?}` or `{values}` | `{ref_id, dim}` |
//! | GET | `/api/reference/{id}` | | `{values, source}` |
//!
//! `condition` is either a plain vector or `{ref_id, ops}`, where each op is one of
//!
//! ```json
//! {"op": "perturb", "lambda": 0.3, "noise_seed": 1}
//! {"op": "interpolate", "other_ref": "r4", "alpha": 0.5}
//! {"op": "pca", "bank_id": "b2", "K": 1, "alpha": -25}
//! {"op": "attr", "matrix_id": "m1", "attribute": "is_red", "scale": 1, "mode": "mean-add"}
//! ```
//!
//! Unknown ids and dimension mismatches are 400; malformed or out-of-range ops are 422.
//! Generations wait in a FIFO queue with `generation_slots` permits (default 1).

mod error;
pub mod ops;
mod routes;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::DefaultBodyLimit;
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;
pub use routes::{VectorEcho, VECTOR_HEADER};
pub use state::{AppState, LoadedModel, Session};

/// Largest accepted upload (RCDE matrices can be tens of megabytes).
pub const MAX_UPLOAD_BYTES: usize = 512 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// DDIM steps when a request does not say.
    pub default_steps: usize,
    /// Generations allowed to run at once; 1 serializes model access.
    pub generation_slots: usize,
    /// Static files served at `/` (the explorer bundle), if any.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { default_steps: 50, generation_slots: 1, ui_dir: None }
    }
}

fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(origin) = origin.to_str() else { return false };
    let host = origin.split("://").nth(1).unwrap_or("");
    let host = host.rsplit_once(':').map_or(host, |(h, port)| if port.chars().all(|c| c.is_ascii_digit()) { h } else { host });
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| is_local_origin(origin)))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([HeaderName::from_static(VECTOR_HEADER)]);
    let ui_dir = state.config.ui_dir.clone();
    let api = Router::new()
        .route("/api/meta", get(routes::meta))
        .route("/api/checkpoint", post(routes::load_checkpoint))
        .route("/api/generate", post(routes::generate))
        .route("/api/embeddings", post(routes::upload_embeddings))
        .route("/api/embeddings/{id}", get(routes::embeddings_info))
        .route("/api/embeddings/{id}/rows/{row}", get(routes::embedding_row))
        .route("/api/directions/pca", post(routes::fit_pca))
        .route("/api/directions/{id}", get(routes::bank))
        .route("/api/reference", post(routes::add_reference))
        .route("/api/reference/{id}", get(routes::reference))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(cors)
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback(move |uri: Uri| static_file(dir.clone(), uri)),
        None => api,
    }
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json" | "map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("wasm") => "application/wasm",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_file(root: PathBuf, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|part| part == ".." || part.contains('\\')) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

/// Serves until the process is stopped, optionally preloading a checkpoint.
pub async fn serve(addr: SocketAddr, config: ServiceConfig, checkpoint: Option<PathBuf>) -> std::io::Result<()> {
    let state = AppState::new(config);
    if let Some(path) = checkpoint {
        let loader = state.clone();
        tokio::task::spawn_blocking(move || loader.load_checkpoint_file(&path))
            .await
            .map_err(std::io::Error::other)?
            .map_err(std::io::Error::other)?;
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
