//! Configuration, orchestration and reporting for box-supervised nuclei
//! segmentation experiments. The `mocl-seg` binary is a thin shell over
//! this library.

pub mod config;
pub mod error;
pub mod events;
pub mod labels;
pub mod matrix;
pub mod pipeline;
pub mod report;

pub use config::{Condition, ExperimentConfig, Tier};
pub use error::{PipelineError, Result};
pub use matrix::{assemble_table, expand_grid, load_matrix, run_matrix, MatrixManifest, ResultTable};
pub use pipeline::{run_pipeline, RunOptions, RunRecord, Stage};
pub use report::emit_report;
