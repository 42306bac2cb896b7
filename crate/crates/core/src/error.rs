//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown task id: {0}")]
    UnknownTask(String),

    #[error("unknown label name: {0}")]
    UnknownLabel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid task generation spec: {0}")]
    InvalidGenSpec(String),

    #[error("zero-norm embedding at row {0}")]
    ZeroNormEmbedding(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular normal equations at lambda={0}; raise lambda")]
    SingularSystem(f64),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
