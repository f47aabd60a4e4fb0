use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("cannot load {path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },
    #[error("refinement impossible: {0}")]
    RefinementImpossible(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty training split")]
    EmptySplit,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] mocl_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

impl ModelError {
    pub(crate) fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        ModelError::Load {
            path: path.into(),
            message: message.into(),
        }
    }
}
