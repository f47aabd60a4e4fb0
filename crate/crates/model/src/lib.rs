//! Frozen-backbone segmentation model with bottleneck adapters and texture
//! injection, trained on box-derived labels and refined with the
//! confidence/similarity-weighted loss from `mocl-core`.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
mod im2col;
pub mod network;
pub mod predict;
pub mod train;

pub use backend::{load_checkpoint_backend, BackendConfig, CheckpointBackend};
pub use checkpoint::{load_checkpoint, load_pretrained_backbone, save_backbone, save_checkpoint};
pub use config::{AdapterConfig, DecoderConfig, EncoderConfig, ModelConfig};
pub use error::{ModelError, Result};
pub use evaluate::{evaluate_split, EvalParams, EvalSample};
pub use network::{AdapterModel, ForwardOutput, Mode};
pub use predict::{predict, predict_prob, PredictionOutput};
pub use train::{refine, train_adapter, Hyperparams, MoclParams, TrainLoss, TrainingHistory, TrainingItem};
