//! HTTP service over a shared, read-only [`Pipeline`].
//!
//! Routes live under `/api/`; every error body is `{code, message, stage}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use docqa::config::QueryOverrides;
use docqa::lexical::LexicalEngine;
use docqa::pipeline::{Pipeline, QueryResponse, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub overrides: QueryOverrides,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub stage: Option<Stage>,
}

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            stage: None,
        }
    }

    fn with_status(self, status: StatusCode) -> Response {
        (status, Json(self)).into_response()
    }
}

impl From<&docqa::Error> for ApiError {
    fn from(e: &docqa::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

/// Same entry point as the `query` subcommand.
pub fn answer(pipeline: &Pipeline, req: &QueryRequest) -> docqa::Result<QueryResponse> {
    pipeline.run_query(&req.question, &req.overrides)
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
}

/// `cors_origin` of `None` or `"*"` allows any origin.
pub fn router(pipeline: Arc<Pipeline>, cors_origin: Option<&str>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match cors_origin.filter(|o| *o != "*").map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(origin),
        Some(Err(_)) => {
            log::warn!("ignoring unparsable CORS origin; allowing any");
            cors.allow_origin(Any)
        }
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/config", get(config))
        .route("/api/chunks/{*id}", get(chunk))
        .route("/api/query", post(query))
        .fallback(|| async {
            ApiError::new("not_found", "no such endpoint").with_status(StatusCode::NOT_FOUND)
        })
        .layer(cors)
        .with_state(AppState { pipeline })
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let p = &s.pipeline;
    Json(json!({
        "status": "ok",
        "chunks": p.chunks().len(),
        "lexical_docs": p.index().doc_count(),
        "vectors": p.store().len(),
        "embedding_dim": p.store().dim(),
        "embedder": p.embedder().name(),
        "generator": p.generator().name(),
        "config_hash": p.config().hash(),
    }))
}

async fn config(State(s): State<AppState>) -> Json<serde_json::Value> {
    let p = &s.pipeline;
    Json(json!({
        "config": p.config().redacted(),
        "config_hash": p.config().hash(),
        "rerank_backends": p.reranker_names(),
        "lexical_engines": [LexicalEngine::Bm25, LexicalEngine::Tfidf],
    }))
}

async fn chunk(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    match s.pipeline.chunk(&id) {
        Some(c) => Json(c.clone()).into_response(),
        None => ApiError::new("chunk_not_found", format!("no chunk `{id}`"))
            .with_status(StatusCode::NOT_FOUND),
    }
}

async fn query(State(s): State<AppState>, body: Bytes) -> Response {
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return ApiError::new("invalid_request", format!("malformed request body: {e}"))
                .with_status(StatusCode::BAD_REQUEST)
        }
    };
    let pipeline = s.pipeline.clone();
    match tokio::task::spawn_blocking(move || answer(&pipeline, &req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => ApiError::from(&e).with_status(StatusCode::BAD_REQUEST),
        Err(e) => ApiError::new("internal_error", format!("query task failed: {e}"))
            .with_status(StatusCode::INTERNAL_SERVER_ERROR),
    }
}

/// Serves until ctrl-c or SIGTERM.
pub async fn serve(
    pipeline: Arc<Pipeline>,
    bind: &str,
    cors_origin: Option<&str>,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {bind}: {e}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(pipeline, cors_origin))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    log::info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
