//! Error types shared across the crate.

use thiserror::Error;

/// Target encoding / prediction decoding failures.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("group {group_index}: no entity labeled '{label}' to act as primary")]
    MissingPrimaryLabel { group_index: usize, label: String },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("label '{0}' is not in the configured class set")]
    UnknownLabel(String),
    #[error("predictions cover {pred_len} tokens but the document has {doc_len}")]
    LengthMismatch { pred_len: usize, doc_len: usize },
}

/// Reader and corpus failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("link references unknown segment id {0}")]
    DanglingLink(i64),
    #[error("segment id {0} appears in more than one group")]
    ConflictingLink(i64),
    #[error("{0}")]
    Invalid(String),
}

/// Model evaluation failures.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Checkpoint archive failures.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("checkpoint incompatible with model config:\n{}", mismatches.join("\n"))]
    Incompatible { mismatches: Vec<String> },
}

/// Run configuration failures (CLI exit code 2).
#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);
