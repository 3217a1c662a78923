use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("query {query} outside interpolation range [{lo}, {hi}]")]
    Range { query: f64, lo: f64, hi: f64 },

    #[error("point lies on the camera principal plane")]
    PrincipalPlane,

    #[error("point projects to infinity (view {view}, point {point})")]
    ProjectionAtInfinity { view: usize, point: usize },

    #[error("motion generation failed: {0}")]
    Generation(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("resource unavailable: {0}")]
    Resource(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
