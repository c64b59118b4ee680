//! Review API over a [`ReviewStore`], plus optional static UI assets at `/`.
//!
//! Decisions go through a single mutex-guarded store, which syncs each one to
//! the log before the response is sent.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use annotate_core::dataset::Dataset;
use annotate_core::review::{export_jsonl, ReviewError, ReviewStore};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

const DEFAULT_LIMIT: usize = 20;

pub struct AppState {
    store: Mutex<ReviewStore>,
    dataset: Dataset,
}

impl AppState {
    pub fn new(store: ReviewStore, dataset: Dataset) -> Arc<Self> {
        Arc::new(Self {
            store: Mutex::new(store),
            dataset,
        })
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/decision", post(decision))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: &str, store: ReviewStore, dataset: Dataset, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let app = router(AppState::new(store, dataset), static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review server on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

struct ApiError(ReviewError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            ReviewError::UnknownInstance(_) => StatusCode::NOT_FOUND,
            ReviewError::InvalidLabel { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(State(state): State<Arc<AppState>>, Query(params): Query<QueueParams>) -> Response {
    let store = state.store.lock().expect("store lock");
    Json(store.pending(params.limit.unwrap_or(DEFAULT_LIMIT))).into_response()
}

#[derive(Deserialize)]
struct DecisionBody {
    instance_id: String,
    label: String,
    reviewer: String,
}

async fn decision(State(state): State<Arc<AppState>>, Json(body): Json<DecisionBody>) -> Result<Response, ApiError> {
    let state = Arc::clone(&state);
    // The store fsyncs; keep that off the async workers.
    let outcome = tokio::task::spawn_blocking(move || {
        let mut store = state.store.lock().expect("store lock");
        store.decide(&body.instance_id, &body.label, &body.reviewer)
    })
    .await
    .expect("decision task")
    .map_err(ApiError)?;
    Ok(Json(outcome).into_response())
}

async fn progress(State(state): State<Arc<AppState>>) -> Response {
    Json(state.store.lock().expect("store lock").progress()).into_response()
}

async fn export(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let rows = state.store.lock().expect("store lock").export(&state.dataset).map_err(ApiError)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], export_jsonl(&rows)).into_response())
}
