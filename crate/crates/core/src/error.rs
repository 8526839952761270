use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} in {file} has no entry in the merge map")]
    UnknownLabel { label: u8, file: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("class {class_id} ({name}) cannot be covered: {reason}")]
    Coverage {
        class_id: u8,
        name: String,
        reason: String,
    },

    #[error("class {0} has no pixels in the mask")]
    EmptyClass(u8),

    #[error("no momentum prototype stored for class {class_id} in the {space} space")]
    UninitializedPrototype { class_id: u8, space: &'static str },

    #[error("{0}")]
    Contract(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
