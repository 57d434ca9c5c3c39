//! Error types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while decoding one of the binary containers (datasets and
/// checkpoints). Every variant names the byte offset where decoding stopped.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unsupported version at byte {offset}: expected {expected}, found {found}")]
    VersionMismatch {
        offset: usize,
        expected: u32,
        found: String,
    },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension mismatch at byte {offset}: {detail}")]
    DimensionMismatch { offset: usize, detail: String },
    #[error("malformed header at byte {offset}: {detail}")]
    Header { offset: usize, detail: String },
    #[error("invalid record value at byte {offset}: {detail}")]
    InvalidRecord { offset: usize, detail: String },
    #[error("{count} trailing bytes after last block at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("parameter layout error: {0}")]
    Layout(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("dataset access audit violated: {0}")]
    Audit(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
