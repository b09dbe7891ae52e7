//! The JSON error envelope every endpoint answers failures with:
//! `{"error": {"code", "message", "details"}}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use meshwatch_core::allocator::PoolError;
use meshwatch_core::firmware::BuildError;
use meshwatch_core::{ConfigIssue, TelemetryError};
use serde::Serialize;

use crate::app::AppError;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Vec<ConfigIssue>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), details: Vec::new() } }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let message = e.to_string();
        match e {
            AppError::UnknownNode(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown-node", message),
            AppError::DuplicateNode(_) => ApiError::new(StatusCode::CONFLICT, "duplicate-node", message),
            AppError::Invalid { code, details, .. } => {
                let mut err = ApiError::bad_request(code, message);
                err.body.details = details;
                err
            }
            AppError::Build(b) => b.into(),
            AppError::Pool(p) => p.into(),
            AppError::Setup(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl From<BuildError> for ApiError {
    fn from(e: BuildError) -> Self {
        let message = e.to_string();
        match e {
            BuildError::ValidationFailed(details) => {
                let mut err = ApiError::bad_request("validation-failed", message);
                err.body.details = details;
                err
            }
            BuildError::NoBuilderForArchitecture(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no-builder", message)
            }
            BuildError::UnknownPlatform(_) => ApiError::not_found(message),
            BuildError::Builder(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "build-failed", message),
        }
    }
}

impl From<PoolError> for ApiError {
    fn from(e: PoolError) -> Self {
        let message = e.to_string();
        match e {
            PoolError::UnknownPool(_) => ApiError::not_found(message),
            PoolError::PoolExhausted(_) => ApiError::new(StatusCode::CONFLICT, "pool-exhausted", message),
            PoolError::InvalidLength { .. } => ApiError::bad_request("invalid-length", message),
            PoolError::UnknownAllocation(_) => ApiError::not_found(message),
            PoolError::DoubleFree(_) => ApiError::new(StatusCode::CONFLICT, "double-free", message),
            PoolError::DuplicatePool(_) | PoolError::NegativeHolddown => ApiError::bad_request("invalid-pool", message),
        }
    }
}

impl From<TelemetryError> for ApiError {
    fn from(e: TelemetryError) -> Self {
        let message = e.to_string();
        match e {
            TelemetryError::AuthFailure => ApiError::new(StatusCode::UNAUTHORIZED, "auth-failure", message),
            TelemetryError::UnknownNode(_) => ApiError::not_found(message),
            _ => ApiError::bad_request("malformed-telemetry", message),
        }
    }
}
