use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use geoloop_store::StoreError;
use serde_json::json;

/// Failure of a service operation, mapped onto the HTTP error envelope
/// `{"error": {"code", "message"}}`.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Unauthorized(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{code}: {message}")]
    ConflictCode { code: &'static str, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Internal(String),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn not_found(what: &str, id: impl std::fmt::Display) -> Self {
        ServiceError::NotFound(format!("unknown {what} {id}"))
    }

    pub fn invalid(m: impl Into<String>) -> Self {
        ServiceError::Invalid(m.into())
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) | ServiceError::ConflictCode { .. } => StatusCode::CONFLICT,
            ServiceError::Store(StoreError::Conflict { .. }) => StatusCode::CONFLICT,
            ServiceError::Store(StoreError::IntegrityViolation(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Store(StoreError::CorruptArchive(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Store(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthorized(_) => "unauthorized",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "validation_failed",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::ConflictCode { code, .. } => code,
            ServiceError::Store(StoreError::Conflict { .. }) => "conflict",
            ServiceError::Store(StoreError::IntegrityViolation(_)) => "integrity_violation",
            ServiceError::Store(StoreError::CorruptArchive(_)) => "corrupt_archive",
            ServiceError::Store(_) => "storage_error",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let message = match &self {
            ServiceError::ConflictCode { message, .. } => message.clone(),
            other => other.to_string(),
        };
        if self.status().is_server_error() {
            tracing::error!(error = %message, "request failed");
        }
        let body = json!({ "error": { "code": self.code(), "message": message } });
        (self.status(), Json(body)).into_response()
    }
}
