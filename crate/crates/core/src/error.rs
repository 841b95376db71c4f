use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("attribute `{name}` value {value} is outside [{min}, {max}]")]
    DomainViolation {
        name: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("missing value for attribute `{0}`")]
    MissingAttribute(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template parse error at byte {position}: {message}")]
    TemplateParse { position: usize, message: String },

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("stage violation: {0}")]
    StageViolation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unreadable sample files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    UnreadableFiles(Vec<PathBuf>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    // The cause is part of the message rather than a `source`, so error
    // chains print it once.
    #[error("io error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("image error on {path}: {cause}")]
    Image { path: PathBuf, cause: image::ImageError },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
