use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use codebook_forge::corpus::CorpusError;
use codebook_forge::engine::{EngineError, FeedbackError};
use codebook_forge::store::StoreError;
use serde::{Deserialize, Serialize};

/// Body of every error response: `{"error": {...}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} {id:?}"))
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message).with_field(field)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Config(c) => Self::invalid(c.field, message),
            EngineError::Feedback(f) => {
                let field = f.field();
                let base = match f {
                    FeedbackError::UnknownId(_) => Self::new(StatusCode::NOT_FOUND, "unknown_feedback_id", message),
                    FeedbackError::InvalidLabel { .. } => {
                        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_label", message)
                    }
                    FeedbackError::Conflict(_) => Self::new(StatusCode::CONFLICT, "feedback_conflict", message),
                };
                match field {
                    Some(f) => base.with_field(f),
                    None => base,
                }
            }
            EngineError::Corpus(CorpusError::InsufficientClass(_)) => Self::invalid("j", message),
            EngineError::Corpus(CorpusError::InvalidLabel { .. } | CorpusError::UnknownId(_)) => {
                Self::invalid("val_labels", message)
            }
            EngineError::Corpus(_) | EngineError::MissingReference(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
            }
            EngineError::PoolTooSmall { .. } => Self::invalid("n", message),
            EngineError::InvalidStatus { .. } => Self::new(StatusCode::CONFLICT, "invalid_status", message),
            EngineError::NoPendingBatch | EngineError::FeedbackIncomplete { .. } => {
                Self::new(StatusCode::CONFLICT, "invalid_status", message)
            }
            EngineError::Store(StoreError::NotEmpty(_)) => Self::new(StatusCode::CONFLICT, "run_exists", message),
            EngineError::Store(StoreError::Locked(_)) => Self::new(StatusCode::CONFLICT, "run_locked", message),
            EngineError::Gateway(_) | EngineError::Embed(_) => {
                Self::new(StatusCode::BAD_GATEWAY, "upstream", message)
            }
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
                field: self.field,
            },
        };
        (self.status, Json(body)).into_response()
    }
}
