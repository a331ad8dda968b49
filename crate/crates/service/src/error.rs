//! The API error envelope and its mapping from core errors.

use std::fmt;

use chartlint_core::blob::StorageError;
use chartlint_core::correction::CorrectionError;
use chartlint_core::detection::DetectionError;
use chartlint_core::extraction::ExtractionError;
use chartlint_core::gateway::GatewayError;
use chartlint_core::ingestion::IngestError;
use chartlint_core::taxonomy::CatalogError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    NotFound,
    Conflict,
    UpstreamModelError,
    ValidationError,
    StorageFailure,
    Unauthorized,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound => 404,
            ErrorCode::Conflict => 409,
            ErrorCode::UpstreamModelError => 502,
            ErrorCode::ValidationError => 422,
            ErrorCode::StorageFailure => 500,
            ErrorCode::Unauthorized => 401,
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::NotFound | ErrorCode::ValidationError => 3,
            ErrorCode::UpstreamModelError => 4,
            ErrorCode::StorageFailure => 5,
            ErrorCode::Conflict | ErrorCode::Unauthorized => 6,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }

    pub fn not_found(what: impl fmt::Display) -> Self {
        Self::new(ErrorCode::NotFound, format!("{what} not found"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ValidationError, message)
    }

    pub fn storage(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::StorageFailure, message)
    }

    pub fn envelope(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "code": self.code, "message": self.message } })
    }
}

impl From<StorageError> for ApiError {
    fn from(e: StorageError) -> Self {
        ApiError::storage(e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        ApiError::validation(e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Storage(_) => ApiError::storage(e.to_string()),
            _ => ApiError::new(ErrorCode::UpstreamModelError, e.to_string()),
        }
    }
}

impl From<DetectionError> for ApiError {
    fn from(e: DetectionError) -> Self {
        match e {
            DetectionError::Gateway(g) => g.into(),
            other => ApiError::new(ErrorCode::UpstreamModelError, other.to_string()),
        }
    }
}

impl From<ExtractionError> for ApiError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Gateway(g) => g.into(),
            ExtractionError::Ingest(i) => i.into(),
            ExtractionError::Io(m) => ApiError::storage(m),
            ExtractionError::UnparseableTable | ExtractionError::EmptyTable => {
                ApiError::new(ErrorCode::UpstreamModelError, e.to_string())
            }
            other => ApiError::validation(other.to_string()),
        }
    }
}

impl From<CorrectionError> for ApiError {
    fn from(e: CorrectionError) -> Self {
        match e {
            CorrectionError::Gateway(g) => g.into(),
            CorrectionError::NoIssues => ApiError::conflict("no detected issues to correct"),
            CorrectionError::EmptySession => ApiError::conflict("no corrected version to refine"),
            CorrectionError::EmptyData => ApiError::validation(e.to_string()),
            other => ApiError::new(ErrorCode::UpstreamModelError, other.to_string()),
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::NameCollision(_) => ApiError::conflict(format!("NameCollision: {e}")),
            CatalogError::AlreadyDecided(_) => ApiError::conflict(format!("AlreadyDecided: {e}")),
            CatalogError::Journal(_) => ApiError::storage(e.to_string()),
            other => ApiError::validation(other.to_string()),
        }
    }
}
