use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("grid of {height}x{width} needs {expected} values, got {found}")]
    BadLength {
        height: usize,
        width: usize,
        expected: usize,
        found: usize,
    },

    #[error("dimensions {height}x{width} are not divisible by factor {factor}")]
    NotDivisible { height: usize, width: usize, factor: usize },

    #[error("spectrum is not conjugate-symmetric: imaginary residue {residue:e} exceeds tolerance {tolerance:e}")]
    NotConjugateSymmetric { residue: f64, tolerance: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unrecognized format: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored CRC32 {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("non-finite values in tensor produced by {0}")]
    NonFiniteTensor(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("gradient became non-finite at attack step {0}")]
    AttackDiverged(usize),

    #[error("batch-norm running statistics are missing; the model has never seen a training pass")]
    NoRunningStats,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
