use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = GearError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GearError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("empty loss: every position of {0} is ignored")]
    EmptyLoss(&'static str),

    #[error("non-finite value produced by op #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("rewriter failed: {0}")]
    Rewrite(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("malformed record at line {line}: {detail}")]
    Record { line: usize, detail: String },

    #[error("item {index}: {source}")]
    Item { index: usize, source: Box<GearError> },
}

/// Distinct failure modes when reading a binary checkpoint or index file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("shape header mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("vocabulary hash mismatch: checkpoint {stored:016x}, supplied {supplied:016x}")]
    VocabMismatch { stored: u64, supplied: u64 },
}

impl GearError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GearError::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GearError::Io { path: path.into(), source }
    }
}
