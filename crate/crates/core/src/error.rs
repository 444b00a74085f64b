use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },

    #[error("no tensor bound for graph leaf `{0}`")]
    MissingInput(String),

    #[error("unknown graph output `{0}`")]
    UnknownOutput(String),

    #[error("backward seed `{node}` must be scalar, got shape {shape:?}")]
    NotScalar { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("training diverged at step {step}: ce_adv={ce_adv}, gen={gen}, grad_norm={grad_norm}")]
    TrainingDiverged {
        step: usize,
        ce_adv: f64,
        gen: f64,
        grad_norm: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("data: {0}")]
    Data(String),

    #[error("dataset is missing classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("covariance for component {0} is not positive definite")]
    NotPositiveDefinite(usize),

    #[error("checkpoint has no mixture statistics")]
    MissingMixture,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("crc mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed field: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
