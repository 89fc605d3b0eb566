use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not conform for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Checkpoint bytes are not a valid serialized model.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// Checkpoint contents disagree with their declared configuration.
    #[error("checkpoint consistency error: {0}")]
    Consistency(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
