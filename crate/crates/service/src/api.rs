//! JSON-over-HTTP front end for the lifecycle engine.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::engine::{CorrectionRequest, Engine, EngineError, IntentRecord, IntentState, Metrics, ModelVersion, Registry};

/// Error body: `{"code": ..., "message": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                code: "bad_request".into(),
                message,
            },
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::Validation(_) | EngineError::Overlap(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::InvalidState(_) | EngineError::Precondition(_) | EngineError::Busy => StatusCode::CONFLICT,
            EngineError::RetrainFailed(_) | EngineError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                code: e.code().into(),
                message: e.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct SubmitIntent {
    pub text: String,
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub state: Option<IntentState>,
}

#[derive(Debug, Default, Deserialize)]
pub struct RetrainQuery {
    /// Start training and return 202 immediately.
    #[serde(default)]
    pub background: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub active_version: String,
}

pub fn router<B: Backend>(engine: Arc<Engine<B>>) -> Router {
    Router::new()
        .route("/api/health", get(health::<B>))
        .route("/api/intents", post(submit_intent::<B>).get(list_intents::<B>))
        .route("/api/intents/:id", get(get_intent::<B>))
        .route("/api/intents/:id/corrections", post(submit_correction::<B>))
        .route("/api/intents/:id/activate", post(activate::<B>))
        .route("/api/model/retrain", post(retrain::<B>))
        .route("/api/model/versions", get(versions::<B>))
        .route("/api/metrics", get(metrics::<B>))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                body: ErrorBody {
                    code: "not_found".into(),
                    message: "no such endpoint".into(),
                },
            }
        })
        .with_state(engine)
}

async fn health<B: Backend>(State(engine): State<Arc<Engine<B>>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        active_version: engine.active().version.clone(),
    })
}

async fn submit_intent<B: Backend>(
    State(engine): State<Arc<Engine<B>>>,
    body: Result<Json<SubmitIntent>, JsonRejection>,
) -> Result<(StatusCode, Json<IntentRecord>), ApiError> {
    let Json(req) = body?;
    let record = blocking(move || engine.submit_intent(&req.text)).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_intents<B: Backend>(
    State(engine): State<Arc<Engine<B>>>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<Vec<IntentRecord>> {
    let Query(q) = query?;
    Ok(Json(engine.list(q.state)))
}

async fn get_intent<B: Backend>(State(engine): State<Arc<Engine<B>>>, Path(id): Path<String>) -> ApiResult<IntentRecord> {
    Ok(Json(engine.get(&id)?))
}

async fn submit_correction<B: Backend>(
    State(engine): State<Arc<Engine<B>>>,
    Path(id): Path<String>,
    body: Result<Json<CorrectionRequest>, JsonRejection>,
) -> ApiResult<IntentRecord> {
    let Json(req) = body?;
    let outcome = engine.submit_correction(&id, &req)?;
    if outcome.retrain_due {
        tokio::task::spawn_blocking(move || match engine.retrain() {
            Ok(v) => tracing::info!(version = %v.id, "automatic retrain finished"),
            Err(EngineError::Busy) => {}
            Err(e) => tracing::warn!(error = %e, "automatic retrain failed"),
        });
    }
    Ok(Json(outcome.record))
}

async fn activate<B: Backend>(State(engine): State<Arc<Engine<B>>>, Path(id): Path<String>) -> ApiResult<IntentRecord> {
    Ok(Json(engine.activate(&id)?))
}

async fn retrain<B: Backend>(
    State(engine): State<Arc<Engine<B>>>,
    query: Result<Query<RetrainQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    if q.background {
        if engine.dataset().is_empty() {
            return Err(EngineError::Precondition("the refinement dataset is empty".into()).into());
        }
        tokio::task::spawn_blocking(move || {
            if let Err(e) = engine.retrain() {
                tracing::warn!(error = %e, "background retrain failed");
            }
        });
        return Ok((StatusCode::ACCEPTED, Json(serde_json::json!({"status": "started"}))).into_response());
    }
    let version: ModelVersion = blocking(move || engine.retrain()).await?;
    Ok((StatusCode::CREATED, Json(version)).into_response())
}

async fn versions<B: Backend>(State(engine): State<Arc<Engine<B>>>) -> Json<Registry> {
    Json(engine.registry())
}

async fn metrics<B: Backend>(State(engine): State<Arc<Engine<B>>>) -> Json<Metrics> {
    Json(engine.metrics())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, EngineError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(EngineError::Internal(e.to_string())))?
        .map_err(ApiError::from)
}

/// Serves until ctrl-c.
pub async fn serve<B: Backend>(engine: Arc<Engine<B>>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
