use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("patch at ({row}, {col}) with side {side} does not fit a {height}x{width} plane")]
    PatchOutOfBounds {
        row: usize,
        col: usize,
        side: usize,
        height: usize,
        width: usize,
    },

    #[error("image {height}x{width} is smaller than patch side {side}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        side: usize,
    },

    #[error("search window {window} holds only {available} candidates, {needed} requested")]
    WindowTooSmall {
        window: usize,
        available: usize,
        needed: usize,
    },

    #[error("pixel ({row}, {col}) is not covered by any patch group")]
    Uncovered { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
