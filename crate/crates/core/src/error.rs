use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cholesky factorization failed after {attempts} attempts (last jitter {last_jitter:e})")]
    FactorizationFailed { attempts: usize, last_jitter: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-positive predictive variance {variance:e} in layer {layer}")]
    NumericalVariance { layer: usize, variance: f64 },

    #[error("cavity distribution is not positive definite")]
    CavityNotPd,

    #[error("moment-matched covariance is not positive definite")]
    MomentsNotPd,

    #[error("posterior is not positive definite after factor update")]
    PosteriorNotPd,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid architecture string {input:?}: {reason}")]
    Architecture { input: String, reason: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
