//! JSON-over-HTTP routes. Inference runs on the blocking pool so the
//! reactor keeps accepting requests while the CPU is busy.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{health, infer, infer_sweep, list_cases, list_metabolites, InferRequest, ModelHandle, SweepRequest};
use crate::error::Error;

#[derive(Clone)]
pub struct AppState {
    pub handle: Arc<ModelHandle>,
    pub data_dir: Option<PathBuf>,
    /// Reject any response whose k-space window drifted from the measurement.
    pub self_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

pub fn status_and_code(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::Argument(_) | Error::Shape(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
        Error::Vocabulary(_) => (StatusCode::BAD_REQUEST, "unknown_metabolite"),
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Pairing(_) | Error::Degenerate(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable"),
        Error::Config(_) => (StatusCode::SERVICE_UNAVAILABLE, "configuration"),
        Error::Load(_) | Error::Checksum(_) => (StatusCode::INTERNAL_SERVER_ERROR, "model_load"),
        Error::Consistency(_) => (StatusCode::INTERNAL_SERVER_ERROR, "consistency_check"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

struct Failure(StatusCode, ApiError);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (status, code) = status_and_code(&e);
        Failure(status, ApiError { code: code.into(), message: e.to_string() })
    }
}

impl From<JsonRejection> for Failure {
    fn from(r: JsonRejection) -> Self {
        Failure(r.status(), ApiError { code: "invalid_body".into(), message: r.body_text() })
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<Json<T>, Failure>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> Result<T, Failure> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(Failure::from),
        Err(e) => Err(Failure(
            StatusCode::INTERNAL_SERVER_ERROR,
            ApiError { code: "internal".into(), message: format!("worker failed: {e}") },
        )),
    }
}

async fn get_health(State(s): State<AppState>) -> Json<super::Health> {
    Json(health(&s.handle))
}

#[derive(Serialize)]
struct Metabolites {
    metabolites: Vec<&'static str>,
}

async fn get_metabolites() -> Json<Metabolites> {
    Json(Metabolites { metabolites: list_metabolites() })
}

async fn get_cases(State(s): State<AppState>) -> Reply<Vec<super::CaseEntry>> {
    let dir = s.data_dir.clone().ok_or_else(|| Failure::from(Error::Config("the service was started without a data directory".into())))?;
    Ok(Json(blocking(move || list_cases(&dir)).await?))
}

async fn post_infer(State(s): State<AppState>, body: Result<Json<InferRequest>, JsonRejection>) -> Reply<super::InferResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || infer(&s.handle, s.data_dir.as_deref(), &req, s.self_check)).await?))
}

async fn post_sweep(State(s): State<AppState>, body: Result<Json<SweepRequest>, JsonRejection>) -> Reply<super::SweepResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || infer_sweep(&s.handle, s.data_dir.as_deref(), &req, s.self_check)).await?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(get_health))
        .route("/cases", get(get_cases))
        .route("/metabolites", get(get_metabolites))
        .route("/infer", post(post_infer))
        .route("/infer/sweep", post(post_sweep))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
