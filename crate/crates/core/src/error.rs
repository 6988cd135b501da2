use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or malformed dataset files.
    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    /// Input violates a documented precondition (shapes, ranges, poses).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    /// Binary grid or checkpoint file is not what it claims to be.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A ray kept more points than the packed batch can hold.
    #[error("capacity {capacity} exceeded: observed {observed} kept points on one ray")]
    Capacity { capacity: usize, observed: usize },

    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { iteration: u64, batch_seed: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for errors caused by numeric breakdown rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
