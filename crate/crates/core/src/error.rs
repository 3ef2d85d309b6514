use thiserror::Error;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular (pivot magnitude {0:e})")]
    SingularMatrix(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input has {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("source {source_index} is silent at bin {bin}")]
    DegenerateBin { source_index: usize, bin: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("bad archive magic")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    VersionUnsupported(u32),
    #[error("archive payload truncated")]
    TruncatedPayload,
    #[error("model parameters are not loaded")]
    UnloadedParameters,
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("reference Gram matrix is singular")]
    SingularGram,
    #[error("gradient norm history is empty")]
    EmptyHistory,
    #[error("source pool has {available} files, need {needed}")]
    PoolTooSmall { available: usize, needed: usize },
    #[error("training degenerated: {skipped} of {total} samples skipped in epoch {epoch}")]
    TrainingDegenerate { epoch: usize, skipped: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
