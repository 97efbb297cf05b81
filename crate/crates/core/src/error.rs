use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("shape contract violated: {0}")]
    Contract(String),

    #[error("covariate dimension {needed} exceeds capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("training diverged at step {step} (last good step {last_good_step})")]
    Divergence { step: usize, last_good_step: usize },

    #[error("loss or gradient is not finite")]
    NonFiniteLoss,

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
