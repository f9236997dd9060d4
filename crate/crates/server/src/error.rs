use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use atelier_core::control_maps::ControlError;
use atelier_core::job_model::{FieldError, JobError};
use atelier_core::store::StoreError;

/// The body of every error response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub field_errors: Vec<FieldError>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            field_errors: Vec::new(),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn validation(field_errors: Vec<FieldError>) -> Self {
        let message = field_errors
            .iter()
            .map(|e| format!("{}: {}", e.field, e.message))
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY.as_u16(),
            code: "validation_failed".into(),
            message,
            field_errors,
        }
    }

    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self::validation(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::MalformedPng(_) => Self::bad_request("malformed_png", msg),
            StoreError::DimensionMismatch { .. } => Self::bad_request("dimension_mismatch", msg),
            StoreError::MissingDepthMeta => Self::bad_request("missing_depth_meta", msg),
            StoreError::InvalidDepth(_) => Self::bad_request("invalid_depth", msg),
            StoreError::NotFound(_) => Self::not_found(msg),
            StoreError::UnknownCapture(_) => Self::new(StatusCode::NOT_FOUND, "unknown_capture", msg),
            StoreError::RevisionConflict { .. } => Self::conflict("revision_conflict", msg),
            StoreError::MalformedRegistry(_) | StoreError::DuplicateStyle(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "malformed_registry", msg)
            }
            StoreError::Corrupt { .. } | StoreError::Io(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", msg)
            }
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let msg = e.to_string();
        match e {
            JobError::ValidationFailed(errors) => Self::validation(errors),
            JobError::ParentNotCompleted(_) => Self::conflict("parent_not_completed", msg),
            JobError::InvalidTransition { .. } => Self::conflict("invalid_transition", msg),
            JobError::DimensionMismatch { .. } => {
                let mut err = Self::field("mask", msg);
                err.code = "mask_dimension_mismatch".into();
                err
            }
            JobError::ResultOutOfRange { .. } => Self::field("result_index", msg),
            JobError::UnknownStyle(name) => Self::field("styles", format!("unknown style {name:?}")),
            JobError::InvalidStyleName(_) | JobError::DuplicateStyle(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "malformed_registry", msg)
            }
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        let msg = e.to_string();
        match e {
            ControlError::MissingDepth => Self::conflict("no_depth", msg),
            ControlError::NoGeometry => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_geometry", msg),
            ControlError::InvalidSettings(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_settings", msg),
            ControlError::ImageTooSmall { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "image_too_small", msg),
            _ => Self::internal(msg),
        }
    }
}

/// Parses a JSON body, separating syntax errors (400) from shape errors
/// (422).
pub fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    use serde_json::error::Category;
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        Category::Data => {
            // serde_json does not expose a path; use the field name when the
            // message quotes one.
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|f| !f.is_empty() && f.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or("body")
                .to_string();
            ApiError::field(&field, msg)
        }
        _ => ApiError::bad_request("malformed_json", e.to_string()),
    })
}
