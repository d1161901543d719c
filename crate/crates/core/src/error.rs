use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("smoothing parameter must be positive, got {0}")]
    NonPositiveSmoothing(f64),

    #[error("log-smoothing {value} outside [{min}, {max}]")]
    SmoothingOutOfRange { value: f64, min: f64, max: f64 },

    #[error("derivative order (dx={dx}, dt={dt}) exceeds the supported total order 3")]
    DerivativeOrder { dx: usize, dt: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("no candidate smoothing value is convex in the tested range")]
    NoneConvex,

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path { path: path.into(), source }
    }
}
