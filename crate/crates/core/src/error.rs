use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ApexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ApexError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate input to {0}: zero-norm vector")]
    DegenerateInput(&'static str),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("spectrum violates Hermitian symmetry (max deviation {0:.3e})")]
    AsymmetricSpectrum(f64),

    #[error("invalid prompt multiplier: {0}")]
    InvalidPrompt(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("seen and unseen domain specs overlap: {0}")]
    OverlappingDomains(String),

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ApexError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ApexError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        ApexError::InvalidArgument(detail.into())
    }
}
