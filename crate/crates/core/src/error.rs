use thiserror::Error;

/// Errors raised anywhere in the search and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters, or structural settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. mixing variables from different tapes.
    #[error("usage error: {0}")]
    Usage(String),

    /// A loss became NaN or infinite during optimization.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Malformed text input. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed binary input. `offset` is the byte offset where reading failed.
    #[error("load error at byte offset {offset}: {msg}")]
    Load { offset: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
