//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape mismatch, bad axis,
    /// out-of-range id, empty input where one is required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation would leave the numeric domain (log of a non-positive
    /// value, overflowing exp, non-finite intermediate, ...).
    #[error("numeric domain error: {0}")]
    Numeric(String),

    /// A text input (CSV row, config line) could not be parsed.
    /// `line` is 1-based and counts physical lines of the input.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Filesystem problem, annotated with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint or manifest is malformed or inconsistent with the
    /// model it is being loaded into.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A metric has no defined value on the given inputs
    /// (e.g. AUC over a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    /// Shorthand for a [`Error::Contract`] with a formatted message.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Shorthand for a [`Error::Numeric`] with a formatted message.
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Shorthand for a parse error at a 1-based line number.
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, message: msg.into() }
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
