use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("conv2d: {0}")]
    InvalidKernel(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a frozen tape")]
    FrozenTape,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed PNM at byte {offset}: {reason}")]
    Pnm { offset: usize, reason: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("quality {0} out of range 1..=100")]
    QualityOutOfRange(i64),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("metric: {0}")]
    Metric(String),

    #[error("operator `{name}` failed: {reason}")]
    Operator { name: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
