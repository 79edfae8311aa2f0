use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum NpqlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("replay buffer not ready: {0}")]
    NotReady(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, NpqlError>;
