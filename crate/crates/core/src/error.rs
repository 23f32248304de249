use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training shard is empty")]
    EmptyShard,

    #[error("Laplace Hessian is degenerate even after jitter")]
    DegenerateHessian,

    #[error("posterior dimension {dim} exceeds the full-covariance cap of {cap}")]
    PosteriorTooLarge { dim: usize, cap: usize },

    #[error("flow fine-tuning produced a non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to merge artifacts from different configs (config hash {first} vs {other})")]
    ConfigHashMismatch { first: String, other: String },

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
