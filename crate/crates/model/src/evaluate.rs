//! Test-split evaluation into a [`MetricsReport`].

use std::collections::BTreeMap;

use mocl_core::grid::{LabelMap, Mask, RgbImage};
use mocl_core::metrics::{self, MetricsReport};
use mocl_core::{Error as CoreError, RealMap};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::AdapterModel;
use crate::predict::predict_prob;

/// Metric names, also the suffix-free keys of the class means.
pub const METRICS: [&str; 8] = ["dice", "iou", "auc", "recall", "precision", "bestF1", "aji", "f1"];

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub image: RgbImage,
    /// Ground-truth masks in the model's class order.
    pub gt_masks: Vec<Mask>,
    /// Ground-truth instances per class; connected components of the masks
    /// when absent.
    pub gt_instances: Option<Vec<LabelMap>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub threshold: f64,
    pub min_instance_size: usize,
    pub iou_threshold: f64,
    pub best_f1_step: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            threshold: metrics::DEFAULT_INSTANCE_THRESHOLD,
            min_instance_size: metrics::DEFAULT_INSTANCE_MIN_SIZE,
            iou_threshold: metrics::DEFAULT_IOU_THRESHOLD,
            best_f1_step: metrics::DEFAULT_BEST_F1_STEP,
        }
    }
}

/// All metrics of one class on one image. AUC is absent when the ground
/// truth has a single class of pixel.
pub fn class_metrics(
    prob: &RealMap,
    gt: &Mask,
    gt_instances: &LabelMap,
    params: &EvalParams,
) -> Result<BTreeMap<&'static str, f64>> {
    let pred = prob.map(|&p| p >= params.threshold);
    let mut m = BTreeMap::new();
    m.insert("dice", metrics::dice(&pred, gt)?);
    m.insert("iou", metrics::iou(&pred, gt)?);
    let (precision, recall) = metrics::precision_recall(&pred, gt)?;
    m.insert("precision", precision);
    m.insert("recall", recall);
    match metrics::pixel_auc(prob, gt) {
        Ok(a) => {
            m.insert("auc", a);
        }
        Err(CoreError::UndefinedAuc) => {}
        Err(e) => return Err(e.into()),
    }
    m.insert("bestF1", metrics::best_f1(prob, gt, params.best_f1_step)?.0);
    let pred_inst = metrics::instances_from_prob(prob, params.threshold, params.min_instance_size)?;
    m.insert("aji", metrics::aji(&pred_inst, gt_instances)?);
    m.insert(
        "f1",
        metrics::instance_f1(&pred_inst, gt_instances, params.iou_threshold)?.f1,
    );
    Ok(m)
}

/// Evaluates `model` on `samples`. Per-image keys are `metric/class` plus the
/// class mean under the bare metric name.
pub fn evaluate_split(
    model: &AdapterModel,
    samples: &[EvalSample],
    method: &str,
    params: &EvalParams,
) -> Result<MetricsReport> {
    let classes = model.classes();
    let mut report = MetricsReport {
        method: method.to_string(),
        ..MetricsReport::default()
    };
    for s in samples {
        if s.gt_masks.len() != classes.len() {
            return Err(ModelError::Shape(format!(
                "{} has {} ground-truth masks for {} classes",
                s.id,
                s.gt_masks.len(),
                classes.len()
            )));
        }
        let probs = predict_prob(model, &s.image)?;
        let mut row = BTreeMap::new();
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (c, name) in classes.iter().enumerate() {
            let inst = match &s.gt_instances {
                Some(v) => v[c].clone(),
                None => metrics::instances_from_mask(&s.gt_masks[c]),
            };
            for (k, v) in class_metrics(&probs[c], &s.gt_masks[c], &inst, params)? {
                row.insert(format!("{k}/{name}"), v);
                let e = sums.entry(k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        for (k, (sum, n)) in sums {
            row.insert(k.to_string(), sum / n as f64);
        }
        report.per_image.insert(s.id.clone(), row);
    }
    report.recompute_aggregate();
    Ok(report)
}
