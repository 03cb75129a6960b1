use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation failed for subjects [{}]: {reason}", ids.join(", "))]
    Validation { ids: Vec<String>, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
