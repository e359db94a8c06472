use std::io;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid session config")]
    InvalidConfig(Vec<String>),
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("session data in {path} is unusable: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] cmc_core::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<String>,
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        use cmc_core::Error as E;
        match self {
            ServiceError::InvalidConfig(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Corrupt { .. } | ServiceError::Storage(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            ServiceError::Core(e) => match e {
                E::InvalidModel(_)
                | E::StrategyLength { .. }
                | E::DecisionOutOfRange { .. }
                | E::StateOutOfRange { .. }
                | E::DimensionMismatch { .. }
                | E::NonFinite(_)
                | E::InvalidParameter(_)
                | E::EmptyEpisode
                | E::InvalidRoom(_)
                | E::Stuck => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }

    fn violations(&self) -> Vec<String> {
        match self {
            ServiceError::InvalidConfig(v) => v.clone(),
            ServiceError::Core(cmc_core::Error::InvalidModel(v)) => v.clone(),
            _ => Vec::new(),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        let body = ErrorBody {
            error: self.to_string(),
            violations: self.violations(),
        };
        (status, Json(body)).into_response()
    }
}
