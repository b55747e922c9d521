//! Error type shared by every module in the crate.
//!
//! All fallible public functions return [`Result`]. Variants are coarse on
//! purpose: callers branch on *kind* (shape bug vs. bad input vs. I/O), while
//! the embedded message carries the operation-specific detail for humans.

use crate::model::LayerDescriptor;

/// Crate-wide error enum.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor arguments have shapes the operation cannot accept.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A scalar or configuration argument is outside its documented domain.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A layer descriptor does not name a quantizable weight of the model.
    #[error("layer {layer} is not addressable here: {detail}")]
    InvalidLayer { layer: LayerDescriptor, detail: String },

    /// A computation produced a non-finite value where one is not allowed.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Serialized model / plan / config bytes failed structural validation.
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    /// Underlying file-system failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for plan files.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// Shorthand for [`Error::InvalidArgument`].
    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    /// Shorthand for [`Error::Malformed`].
    pub fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed { what, detail: detail.into() }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
