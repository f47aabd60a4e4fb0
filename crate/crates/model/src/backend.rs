//! A box-promptable backend backed by a trained adapter checkpoint.

use std::path::Path;

use mocl_core::annotator::PromptableBackend;
use mocl_core::components::largest_component;
use mocl_core::data_ingest::BoxAnnotation;
use mocl_core::grid::{Mask, RgbImage};
use mocl_core::{Error as CoreError, Result as CoreResult};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::error::Result;
use crate::network::AdapterModel;
use crate::predict::predict_prob;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub threshold: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

/// Runs the model on a window around the box, thresholds the probability of
/// the box's class (the maximum over classes for unknown class names) inside
/// the box and keeps the largest component.
#[derive(Debug)]
pub struct CheckpointBackend {
    model: AdapterModel,
    config: BackendConfig,
    name: String,
}

impl CheckpointBackend {
    pub fn new(model: AdapterModel, config: BackendConfig) -> Self {
        Self {
            model,
            config,
            name: "checkpoint".into(),
        }
    }

    pub fn model(&self) -> &AdapterModel {
        &self.model
    }
}

pub fn load_checkpoint_backend(checkpoint: &Path, config: BackendConfig) -> Result<CheckpointBackend> {
    Ok(CheckpointBackend::new(load_checkpoint(checkpoint)?, config))
}

/// Start of a window of length `win` covering `[lo, hi)` inside `[0, len)`.
fn window_start(lo: usize, hi: usize, win: usize, len: usize) -> usize {
    let centre = (lo + hi) / 2;
    centre.saturating_sub(win / 2).min(len - win)
}

impl PromptableBackend for CheckpointBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn segment(&self, image: &RgbImage, prompt: &BoxAnnotation) -> CoreResult<Mask> {
        let (h, w) = image.shape();
        prompt.check_bounds(h, w)?;
        let s = self.model.input_size();
        if h < s || w < s {
            return Err(CoreError::Backend(format!(
                "image {h}×{w} is smaller than the model input {s}"
            )));
        }
        let (y0, x0, y1, x1) = (prompt.y0, prompt.x0, prompt.y1, prompt.x1);
        let wh = (y1 - y0).max(s);
        let ww = (x1 - x0).max(s);
        let wy = window_start(y0, y1, wh, h);
        let wx = window_start(x0, x1, ww, w);
        let window = image.crop(wy, wx, wh, ww)?;
        let probs = predict_prob(&self.model, &window).map_err(|e| CoreError::Backend(e.to_string()))?;
        let class = self.model.classes().iter().position(|c| *c == prompt.class_name);
        let mut inside = Mask::new(y1 - y0, x1 - x0);
        for y in y0..y1 {
            for x in x0..x1 {
                let (ly, lx) = (y - wy, x - wx);
                let p = match class {
                    Some(c) => probs[c].at(ly, lx),
                    None => probs.iter().map(|m| m.at(ly, lx)).fold(0.0, f64::max),
                };
                inside.set(y - y0, x - x0, p >= self.config.threshold);
            }
        }
        let mut out = Mask::new(h, w);
        out.paste(y0, x0, &largest_component(&inside));
        Ok(out)
    }
}
