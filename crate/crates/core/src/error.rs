use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    /// Input data that cannot be processed (non-finite losses, invalid simplex).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The per-round call order was not respected.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A competitor path uses a transition of weight zero.
    #[error("path leaves the competition class at round {round}")]
    OutOfClass { round: usize },

    /// A runtime invariant was breached; `round` is 1-based.
    #[error("invariant violated at round {round}: {detail}")]
    Invariant { round: usize, detail: String },

    #[error("enumeration refused: {count} paths exceeds the limit of {limit}")]
    EnumerationLimit { count: u128, limit: u128 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty loss table")]
    EmptyTable,

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
