use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MtsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MtsError {
    /// A matrix or tensor did not match the dimension of the mode it was applied to.
    #[error("mode {mode}: expected dimension {expected}, found {found}")]
    ModeMismatch {
        mode: usize,
        expected: usize,
        found: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("materialization refused: input dimension {dim} exceeds guard {guard}")]
    SizeGuard { dim: usize, guard: usize },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

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

impl MtsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MtsError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MtsError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MtsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MtsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
