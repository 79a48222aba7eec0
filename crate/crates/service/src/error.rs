use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use lams_core::episode::EpisodeError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("no session {0}")]
    NotFound(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("{op} is not available for strategy {strategy}")]
    WrongStrategy { op: &'static str, strategy: String },
    #[error("learning stores for {task}/{run_id} are in use by session {session}")]
    StoresBusy { task: String, run_id: String, session: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownTask(_) => "unknown_task",
            ServiceError::UnknownStrategy(_) => "unknown_strategy",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::SessionClosed(_) => "session_closed",
            ServiceError::WrongStrategy { .. } => "wrong_strategy",
            ServiceError::StoresBusy { .. } => "stores_busy",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownTask(_) | ServiceError::UnknownStrategy(_) | ServiceError::Invalid(_) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::SessionClosed(_) => StatusCode::GONE,
            ServiceError::WrongStrategy { .. } | ServiceError::StoresBusy { .. } => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Maps an episode error raised inside session `id`.
    pub fn from_episode(id: &str, e: EpisodeError) -> Self {
        match e {
            EpisodeError::Finished => ServiceError::SessionClosed(id.to_string()),
            EpisodeError::WrongStrategy { op, strategy } => ServiceError::WrongStrategy {
                op,
                strategy: strategy.to_string(),
            },
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
