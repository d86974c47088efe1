//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong across configuration, I/O, model
/// construction, training and evaluation.
#[derive(Debug, Error)]
pub enum GlocalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// A configuration value violates a named constraint.
    #[error("config constraint `{constraint}` violated: {detail}")]
    InvalidConfig { constraint: String, detail: String },

    /// Malformed or truncated archive file.
    #[error("archive format error in {path:?}: {detail}")]
    ArchiveFormat { path: PathBuf, detail: String },

    /// A required named array is absent from an archive.
    #[error("archive is missing required entry `{0}`")]
    MissingEntry(String),

    /// A named array has a different shape than the consumer expects.
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// A token sequence does not fit the text context window.
    #[error("sequence of {needed} tokens exceeds context length {context}")]
    ContextOverflow { needed: usize, context: usize },

    /// Input image dimensions disagree with the configured resolution.
    #[error("image resolution mismatch: expected {expected:?}, found {found:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("input contains a non-finite value: {0}")]
    NonFinite(String),

    /// Dataset scan produced no usable samples.
    #[error("dataset index is empty under {0:?}")]
    EmptyIndex(PathBuf),

    #[error("dataset layout error: {0}")]
    DatasetLayout(String),

    /// An anomalous training sample arrived without a ground-truth mask.
    #[error("sample {0:?} is labeled anomalous but has no mask")]
    MissingMask(PathBuf),

    /// A metric's input requirements are not met.
    #[error("metric input invalid: {0}")]
    MetricInput(String),

    /// Training produced a non-finite loss and stopped.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, GlocalError>;

impl GlocalError {
    /// Stable machine-readable discriminant used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            GlocalError::Io(_) => "io",
            GlocalError::Json(_) => "json",
            GlocalError::Image(_) => "image",
            GlocalError::InvalidConfig { .. } => "invalid_config",
            GlocalError::ArchiveFormat { .. } => "archive_format",
            GlocalError::MissingEntry(_) => "missing_entry",
            GlocalError::ShapeMismatch { .. } => "shape_mismatch",
            GlocalError::ContextOverflow { .. } => "context_overflow",
            GlocalError::ResolutionMismatch { .. } => "resolution_mismatch",
            GlocalError::NonFinite(_) => "non_finite",
            GlocalError::EmptyIndex(_) => "empty_index",
            GlocalError::DatasetLayout(_) => "dataset_layout",
            GlocalError::MissingMask(_) => "missing_mask",
            GlocalError::MetricInput(_) => "metric_input",
            GlocalError::NonFiniteLoss { .. } => "non_finite_loss",
            GlocalError::Other(_) => "other",
        }
    }
}
