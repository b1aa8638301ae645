//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors or stacks disagree along a named axis.
    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A precondition on an operation's arguments was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The network architecture description is inconsistent.
    #[error("invalid network spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },

    /// A serialized model stream is corrupt or unsupported.
    #[error("model format error: {0}")]
    ModelFormat(String),

    /// A training or run configuration is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset manifest failed validation.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A class label index fell outside the class table.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A class has no samples, so per-class accuracy is undefined.
    #[error("class {class} has zero samples; mean class accuracy is undefined")]
    EmptyClass { class: usize },

    /// An operation needed a mask that the sample does not carry.
    #[error("mask required: {0}")]
    MaskRequired(String),

    /// A pretrained network's output size does not match the dataset.
    #[error(
        "class count mismatch: snapshot has {snapshot} outputs, dataset has {dataset} classes; \
         re-head the network manually before fine-tuning"
    )]
    ClassCountMismatch { snapshot: usize, dataset: usize },

    /// Raster file in a format this pipeline does not accept.
    #[error("unsupported image {path}: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },

    /// Raster file failed to decode.
    #[error("image decode failed for {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    /// Filesystem failure, with the offending path attached.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-parsable class for CLI exit lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidSpec { .. } => "invalid-spec",
            Error::ModelFormat(_) => "model-format",
            Error::Config(_) => "config",
            Error::Manifest(_) => "manifest",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::EmptyClass { .. } => "empty-class",
            Error::MaskRequired(_) => "mask-required",
            Error::ClassCountMismatch { .. } => "class-count-mismatch",
            Error::UnsupportedImage { .. } => "unsupported-image",
            Error::ImageDecode { .. } => "image-decode",
            Error::Io { .. } => "io",
        }
    }

    /// Wraps an I/O failure with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
