use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum UnitError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sharing error: {0}")]
    Sharing(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = UnitError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::UnitError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
