//! Core building blocks for converting weak box annotations into pixel
//! labels, weighting a segmentation loss by prediction confidence and
//! embedding similarity, and scoring the result.
//!
//! Everything here is pure and deterministic given its inputs and seed, and
//! compiles for `wasm32-unknown-unknown`.

pub mod annotator;
pub mod components;
pub mod data_ingest;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod mocl;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod synth;
pub mod texture;

pub use error::{Error, Result};
pub use grid::{EmbeddingMap, Grid, LabelMap, Mask, RealMap, RgbImage};
