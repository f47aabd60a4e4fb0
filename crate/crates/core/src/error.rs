use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("sample `{id}` failed validation: {message}")]
    Validation { id: String, message: String },
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("box out of bounds: {0}")]
    Bounds(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no annotated pixels for class `{0}`")]
    EmptyAnnotation(String),
    #[error("empty top-k selection")]
    EmptySelection,
    #[error("loss weights sum to zero")]
    DegenerateWeights,
    #[error("AUC undefined: ground truth contains a single class")]
    UndefinedAuc,
    #[error("all paired differences are zero")]
    DegenerateSample,
    #[error("backend error: {0}")]
    Backend(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
