use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("singular light configuration: {0}")]
    Singular(String),
    #[error("need at least {needed} images, got {got}")]
    Arity { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("insufficient light diversity: {0}")]
    Diversity(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line, msg: msg.into() }
    }
}
