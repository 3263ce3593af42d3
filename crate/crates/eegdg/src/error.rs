//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by the library. Each variant carries enough context to
/// print a single actionable line.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values, unstable filters, singular systems.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary file. `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Input data violates a documented precondition (labels, domains, sizes).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// An API contract was violated (empty input, wrong call order).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }
    pub fn ingestion(msg: impl Into<String>) -> Self {
        Error::Ingestion(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
