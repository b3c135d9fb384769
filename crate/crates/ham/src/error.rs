use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("gradient tape already consumed; run a new forward pass")]
    TapeConsumed,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged (non-finite loss) at epoch {0}")]
    Diverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
