//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensors, layers, data handling and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Batch too small for the requested operation (e.g. batch statistics).
    #[error("batch error: {0}")]
    Batch(String),

    /// An argument is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index (class id, word id) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Operation invoked in a state that does not support it.
    #[error("state error: {0}")]
    State(String),

    /// Input data violates a content contract.
    #[error("data error: {0}")]
    Data(String),

    /// A generator was asked for more than its space can hold.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A text file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary or structured file has the wrong layout.
    #[error("format error: {0}")]
    Format(String),

    /// A numeric computation left its valid domain (NaN, Inf, zero norm).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Negative sampling could not find a valid candidate.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Training or command configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
