use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FopError>;

#[derive(Debug, Error)]
pub enum FopError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A precondition of an operation was not met (asymmetric input, bad dimension, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate preconditioner: {0}")]
    Degenerate(String),

    #[error("angle undefined for zero-length vector")]
    UndefinedAngle,

    #[error("bad IDX file {}: {msg}", path.display())]
    IdxFormat { path: PathBuf, msg: String },

    #[error("truncated IDX file {}: expected {expected} bytes, found {found}", path.display())]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("run record: {0}")]
    Record(String),

    #[error("unsupported run record format version {found} (this build reads {supported}.x)")]
    UnsupportedVersion { found: String, supported: u32 },

    #[error("run record has no {what}; re-run with {hint}")]
    MissingSnapshots { what: String, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, expected: (usize, usize), got: (usize, usize)) -> FopError {
    FopError::ShapeMismatch {
        op,
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}
