//! JSON API of the control center, consumed by the dashboard.
//!
//! | method | path                              |                                   |
//! |--------|-----------------------------------|-----------------------------------|
//! | GET    | `/api/health`                     | liveness                          |
//! | GET    | `/api/network`                    | node states                       |
//! | GET    | `/api/experiments`                | experiment summaries              |
//! | POST   | `/api/experiments`                | submit `{model_config, settings}` |
//! | GET    | `/api/experiments/:id`            | one summary                       |
//! | POST   | `/api/experiments/:id/model`      | fetch the final model to disk     |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedplat_core::schema::{ValidationIssue, ValidationReport};
use serde_json::{json, Value};

use crate::cc::{ControlCenter, ModelError, SubmitError};

type Cc = Arc<ControlCenter>;

pub fn router(cc: Cc) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/api/network", get(network))
        .route("/api/experiments", get(list).post(submit))
        .route("/api/experiments/:id", get(show))
        .route("/api/experiments/:id/model", post(fetch_model))
        .with_state(cc)
}

pub async fn serve(cc: Cc, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("control center API on http://{}", listener.local_addr()?);
    axum::serve(listener, router(cc)).await
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, e)
}

async fn network(State(cc): State<Cc>) -> Response {
    Json(cc.network()).into_response()
}

async fn list(State(cc): State<Cc>) -> Response {
    Json(cc.experiments()).into_response()
}

async fn show(State(cc): State<Cc>, Path(id): Path<String>) -> Response {
    match cc.experiment(&id) {
        Some(e) => Json(e).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown experiment {id}")),
    }
}

fn invalid(errors: Vec<ValidationIssue>) -> Response {
    (StatusCode::BAD_REQUEST, Json(ValidationReport::from_errors(errors))).into_response()
}

/// The body is parsed by hand so malformed JSON gets a validation report too.
async fn submit(State(cc): State<Cc>, body: axum::body::Bytes) -> Response {
    let doc: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return invalid(vec![ValidationIssue::new("", format!("invalid JSON: {e}"))]),
    };
    let (Some(model_config), Some(settings)) = (doc.get("model_config"), doc.get("settings")) else {
        let mut errors = Vec::new();
        for key in ["model_config", "settings"] {
            if doc.get(key).is_none() {
                errors.push(ValidationIssue::new(key, "required"));
            }
        }
        return invalid(errors);
    };
    let (model_config, settings) = (model_config.clone(), settings.clone());
    let res = tokio::task::spawn_blocking(move || cc.submit(model_config, settings)).await;
    match res {
        Ok(Ok(id)) => (StatusCode::CREATED, Json(json!({ "experiment_id": id }))).into_response(),
        Ok(Err(SubmitError::Invalid(report))) => (StatusCode::BAD_REQUEST, Json(report)).into_response(),
        Ok(Err(SubmitError::Rejected(errors))) => invalid(errors),
        Ok(Err(SubmitError::Busy(errors))) => {
            (StatusCode::CONFLICT, Json(ValidationReport::from_errors(errors))).into_response()
        }
        Ok(Err(e @ SubmitError::Timeout)) => error(StatusCode::GATEWAY_TIMEOUT, e),
        Ok(Err(e)) => internal(e),
        Err(e) => internal(e),
    }
}

async fn fetch_model(State(cc): State<Cc>, Path(id): Path<String>) -> Response {
    let res = tokio::task::spawn_blocking(move || cc.fetch_model_to_store(&id)).await;
    match res {
        Ok(Ok(path)) => Json(json!({ "path": path })).into_response(),
        Ok(Err(e @ ModelError::Unknown(_))) => error(StatusCode::NOT_FOUND, e),
        Ok(Err(e @ ModelError::NotFinalized(_))) => error(StatusCode::CONFLICT, e),
        Ok(Err(e @ ModelError::Timeout)) => error(StatusCode::GATEWAY_TIMEOUT, e),
        Ok(Err(e)) => internal(e),
        Err(e) => internal(e),
    }
}
