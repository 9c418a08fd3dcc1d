use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum XpvError {
    #[error("invalid subsystem: {0}")]
    InvalidSubsystem(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("unsupported unitary mode: {0}")]
    Mode(String),

    #[error("invalid channel: {0}")]
    Channel(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = XpvError> = std::result::Result<T, E>;
