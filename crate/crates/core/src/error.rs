use thiserror::Error;

/// Crate-wide error type. Shape violations inside `ndgrad` ops panic instead,
/// since they are programming errors rather than bad input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no exact-gradient oracle: {0}")]
    MissingOracle(String),
    #[error("undefined posterior: {0}")]
    UndefinedPosterior(String),
    #[error("decode failure: {0}")]
    DecodeFailure(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
