use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("fully masked softmax row {row}")]
    DegenerateRow { row: usize },

    #[error("degenerate noise level t={t}: eta_bar is zero at an interior level")]
    DegenerateLevel { t: usize },

    #[error("division by zero at level t={t}: gamma is 1")]
    CleanLevel { t: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("kv cache error: {0}")]
    Cache(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
