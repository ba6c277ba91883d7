use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("session {0} not found")]
    SessionNotFound(Uuid),
    #[error("a solve job is already running")]
    JobAlreadyRunning,
    #[error("expected revision {expected}, current is {current}")]
    StaleRevision { expected: u64, current: u64 },
    #[error("session has no mesh")]
    NoMesh,
    #[error("no committed plan")]
    NoPlan,
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::SessionNotFound(_) => "SessionNotFound",
            ApiError::JobAlreadyRunning => "JobAlreadyRunning",
            ApiError::StaleRevision { .. } => "StaleRevision",
            ApiError::NoMesh => "NoMesh",
            ApiError::NoPlan => "NoPlan",
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::SessionNotFound(_) | ApiError::NoPlan => StatusCode::NOT_FOUND,
            ApiError::JobAlreadyRunning | ApiError::StaleRevision { .. } | ApiError::NoMesh => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.kind(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
