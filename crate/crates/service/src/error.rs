use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;
use whatif_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0} not found")]
    NotFound(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("malformed JSON at line {line}, column {column}: {message}")]
    BadJson {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("reproduction mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::BadJson {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

impl From<toml::de::Error> for ServiceError {
    fn from(e: toml::de::Error) -> Self {
        ServiceError::Config(e.to_string())
    }
}

impl ServiceError {
    /// Short machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => match e {
                CoreError::Config(_) => "config",
                CoreError::InvalidIntervention(_) => "invalid_intervention",
                CoreError::DegenerateTreatment(_) => "degenerate_treatment",
                CoreError::Contract(_) => "contract",
                CoreError::Capacity { .. } => "capacity",
                CoreError::Positivity(_) => "positivity",
                CoreError::Divergence { .. } => "divergence",
                CoreError::NonFiniteLoss => "non_finite",
                CoreError::Parse { .. } => "parse",
                CoreError::Format(_) => "format",
                CoreError::Empty(_) => "empty",
                CoreError::Io(_) => "io",
                CoreError::Json(_) => "json",
            },
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::BadJson { .. } => "json",
            ServiceError::Config(_) => "config",
            ServiceError::Mismatch(_) => "mismatch",
            ServiceError::Io(_) => "io",
            ServiceError::Internal(_) => "internal",
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for failures at
    /// run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Config(_) | ServiceError::Invalid(_) | ServiceError::BadJson { .. } => 2,
            ServiceError::Core(CoreError::Config(_) | CoreError::Parse { .. } | CoreError::Json(_)) => 2,
            _ => 3,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) | ServiceError::BadJson { .. } | ServiceError::Config(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(e) => match e {
                CoreError::Positivity(_) | CoreError::DegenerateTreatment(_) => StatusCode::UNPROCESSABLE_ENTITY,
                CoreError::Config(_)
                | CoreError::InvalidIntervention(_)
                | CoreError::Contract(_)
                | CoreError::Capacity { .. }
                | CoreError::Parse { .. }
                | CoreError::Format(_)
                | CoreError::Empty(_)
                | CoreError::Json(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// `{"error": {"kind", "message", "location"?}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let location = match self {
            ServiceError::Core(CoreError::Parse { row, column, .. }) => Some(json!({"row": row, "column": column})),
            ServiceError::BadJson { line, column, .. } => Some(json!({"line": line, "column": column})),
            _ => None,
        };
        let mut body = json!({"kind": self.kind(), "message": self.to_string()});
        if let Some(loc) = location {
            body["location"] = loc;
        }
        json!({ "error": body })
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.to_json())).into_response()
    }
}
