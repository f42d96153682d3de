use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row norm {norm:e} is at or below the normalization floor")]
    ZeroNorm { norm: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("objective is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),

    #[error("token index {index} out of vocabulary of size {size}")]
    OutOfVocab { index: usize, size: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("span [{start}, {end}) out of range for sequence of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("batch of {0} is too small; at least 2 are required")]
    BatchTooSmall(usize),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty batch")]
    EmptyBatch,

    #[error("contrastive loss needs at least one positive")]
    NoPositives,

    #[error("no relation marker found in {0:?}")]
    MarkerNotFound(String),

    #[error("more than one relation marker in {0:?}")]
    MultipleMarkers(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("{docs} documents cannot fill {k} folds")]
    TooFewDocuments { docs: usize, k: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
