//! Corrective loss weighting: confidence maps, top-k prototype embeddings,
//! cosine similarity maps, per-pixel weight maps and the weighted
//! soft-Dice + BCE objective with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, resize_nearest, EmbeddingMap, Grid, Mask, RealMap};

pub const DEFAULT_TOP_K: usize = 64;
pub const DEFAULT_EPS_FLOOR: f64 = 0.05;
pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-class foreground confidence `W`, values in `[0, 1]`.
pub type ConfidenceMap = RealMap;
/// Cosine similarity to the class prototypes, values in `[-1, 1]`.
pub type SimilarityMap = RealMap;

/// Slices the foreground-probability channel of class `class_index`.
pub fn confidence_map(prob: &[RealMap], class_index: usize) -> Result<ConfidenceMap> {
    let channel = prob.get(class_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "class index {class_index} out of range for {} channels",
            prob.len()
        ))
    })?;
    Ok(channel.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub embedding: Vec<f64>,
    pub confidence: f64,
    /// `(row, col)` on the embedding grid.
    pub location: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKSelection {
    pub entries: Vec<TopKEntry>,
    pub k_requested: usize,
    pub class_name: String,
}

/// The `k` most confident embeddings among annotated pixels.
///
/// `confidence` and `annotation` are resampled onto the embedding grid by
/// nearest neighbour. Equal confidences keep row-major order.
pub fn select_topk(
    embeddings: &EmbeddingMap,
    confidence: &ConfidenceMap,
    annotation: &Mask,
    k: usize,
    class_name: &str,
) -> Result<TopKSelection> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    confidence.ensure_same_shape(annotation, "confidence vs annotation")?;
    let (eh, ew) = embeddings.shape();
    let w = resize_nearest(confidence, eh, ew);
    let y = resize_nearest(annotation, eh, ew);
    let mut candidates: Vec<(usize, f64)> = y
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| (i, w.as_slice()[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyAnnotation(class_name.to_string()));
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(k);
    let entries = candidates
        .into_iter()
        .map(|(i, conf)| {
            let (r, c) = (i / ew, i % ew);
            TopKEntry {
                embedding: embeddings.vector(r, c).to_vec(),
                confidence: conf,
                location: (r, c),
            }
        })
        .collect();
    Ok(TopKSelection {
        entries,
        k_requested: k,
        class_name: class_name.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the pairwise cosines to each selected embedding.
    #[default]
    MeanCosine,
    /// Cosine to the mean of the selected embeddings.
    MeanEmbedding,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity of every embedding to the selected prototypes, bilinearly
/// upsampled to `out_shape`.
pub fn similarity_map(
    embeddings: &EmbeddingMap,
    selection: &TopKSelection,
    out_shape: (usize, usize),
    aggregation: Aggregation,
) -> Result<SimilarityMap> {
    if selection.entries.is_empty() {
        return Err(Error::EmptySelection);
    }
    let m = embeddings.channels();
    if selection.entries.iter().any(|e| e.embedding.len() != m) {
        return Err(Error::Shape(format!("selection embeddings do not have {m} channels")));
    }
    if !embeddings.is_finite() {
        return Err(Error::InvalidArgument(
            "embedding map contains non-finite values".into(),
        ));
    }
    // both variants reduce to a cosine against one reference direction
    let k = selection.entries.len() as f64;
    let mut reference = vec![0.0; m];
    for e in &selection.entries {
        let scale = match aggregation {
            Aggregation::MeanCosine => {
                let n = norm(&e.embedding);
                if n == 0.0 {
                    continue;
                }
                1.0 / (n * k)
            }
            Aggregation::MeanEmbedding => 1.0 / k,
        };
        for (r, v) in reference.iter_mut().zip(&e.embedding) {
            *r += v * scale;
        }
    }
    let ref_norm = match aggregation {
        Aggregation::MeanCosine => 1.0,
        Aggregation::MeanEmbedding => norm(&reference),
    };
    let (eh, ew) = embeddings.shape();
    let coarse = Grid::from_fn(eh, ew, |y, x| {
        let e = embeddings.vector(y, x);
        let n = norm(e);
        if n == 0.0 || ref_norm == 0.0 {
            0.0
        } else {
            (dot(e, &reference) / (n * ref_norm)).clamp(-1.0, 1.0)
        }
    });
    Ok(resize_bilinear(&coarse, out_shape.0, out_shape.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMaps {
    pub omega_w: RealMap,
    pub omega_s: RealMap,
    pub eps_floor: f64,
}

impl WeightMaps {
    /// Per-pixel loss weight `Ω = ω(W) ⊙ ω(S)`.
    pub fn combined(&self) -> RealMap {
        Grid::from_fn(self.omega_w.height(), self.omega_w.width(), |y, x| {
            self.omega_w.at(y, x) * self.omega_s.at(y, x)
        })
    }

    pub fn ones(shape: (usize, usize)) -> Self {
        Self {
            omega_w: RealMap::filled(shape.0, shape.1, 1.0),
            omega_s: RealMap::filled(shape.0, shape.1, 1.0),
            eps_floor: 0.0,
        }
    }
}

/// `ω(W) = exp(W)·Y`, `ω(S) = S·Y`; both take `eps_floor` where `Y = 0`.
pub fn weight_maps(
    confidence: &ConfidenceMap,
    similarity: &SimilarityMap,
    annotation: &Mask,
    eps_floor: f64,
) -> Result<WeightMaps> {
    confidence.ensure_same_shape(similarity, "confidence vs similarity")?;
    confidence.ensure_same_shape(annotation, "confidence vs annotation")?;
    if !(eps_floor >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_floor must be ≥ 0, got {eps_floor}"
        )));
    }
    let (h, w) = confidence.shape();
    let omega_w = Grid::from_fn(h, w, |y, x| {
        if annotation.at(y, x) {
            confidence.at(y, x).exp()
        } else {
            eps_floor
        }
    });
    let omega_s = Grid::from_fn(h, w, |y, x| {
        if annotation.at(y, x) {
            similarity.at(y, x)
        } else {
            eps_floor
        }
    });
    Ok(WeightMaps {
        omega_w,
        omega_s,
        eps_floor,
    })
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Weighted soft-Dice + weighted BCE and its gradient with respect to the
/// (unclamped) probabilities.
pub fn weighted_dice_bce_grad(target: &Mask, prob: &RealMap, omega: &RealMap) -> Result<(f64, RealMap)> {
    target.ensure_same_shape(prob, "target vs prob")?;
    target.ensure_same_shape(omega, "target vs weights")?;
    let om = omega.as_slice();
    let total: f64 = om.iter().sum();
    if total == 0.0 || om.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let (mut inter, mut psum, mut ysum, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for ((&t, &p), &o) in target.as_slice().iter().zip(prob.as_slice()).zip(om) {
        let p = clamp_prob(p);
        let y = if t { 1.0 } else { 0.0 };
        inter += o * p * y;
        psum += o * p;
        ysum += o * y;
        bce -= o * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    let denom = psum + ysum + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let bce_norm = total.max(DICE_SMOOTH);
    let loss = 1.0 - numer / denom + bce / bce_norm;

    let grad = Grid::from_fn(prob.height(), prob.width(), |r, c| {
        let raw = prob.at(r, c);
        let p = clamp_prob(raw);
        if p != raw {
            return 0.0;
        }
        let o = omega.at(r, c);
        let y = if target.at(r, c) { 1.0 } else { 0.0 };
        let d_dice = -(2.0 * o * y * denom - numer * o) / (denom * denom);
        let d_bce = o * (-y / p + (1.0 - y) / (1.0 - p)) / bce_norm;
        d_dice + d_bce
    });
    Ok((loss, grad))
}

pub fn weighted_dice_bce(target: &Mask, prob: &RealMap, omega: &RealMap) -> Result<f64> {
    weighted_dice_bce_grad(target, prob, omega).map(|(l, _)| l)
}

/// Corrective loss: weighted soft-Dice + BCE with `Ω = ω(W) ⊙ ω(S)`.
pub fn mocl_loss(target: &Mask, prob: &RealMap, weights: &WeightMaps) -> Result<f64> {
    weighted_dice_bce(target, prob, &weights.combined())
}

pub fn mocl_loss_grad(target: &Mask, prob: &RealMap, weights: &WeightMaps) -> Result<(f64, RealMap)> {
    weighted_dice_bce_grad(target, prob, &weights.combined())
}

/// Unweighted soft-Dice (smoothing 1) plus mean BCE.
pub fn soft_dice_bce(target: &Mask, prob: &RealMap) -> Result<f64> {
    target.ensure_same_shape(prob, "target vs prob")?;
    let n = prob.len() as f64;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    let mut bce = 0.0;
    for (&t, &p) in target.as_slice().iter().zip(prob.as_slice()) {
        let p = clamp_prob(p);
        if t {
            inter += p;
            ysum += 1.0;
            bce -= p.ln();
        } else {
            bce -= (1.0 - p).ln();
        }
        psum += p;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + ysum + DICE_SMOOTH) + bce / n.max(DICE_SMOOTH))
}

/// Mean `Ω` on annotated and on background pixels (`None` when a region is empty).
pub fn weight_statistics(annotation: &Mask, omega: &RealMap) -> (Option<f64>, Option<f64>) {
    let (mut fg, mut nfg, mut bg, mut nbg) = (0.0, 0usize, 0.0, 0usize);
    for (&on, &o) in annotation.as_slice().iter().zip(omega.as_slice()) {
        if on {
            fg += o;
            nfg += 1;
        } else {
            bg += o;
            nbg += 1;
        }
    }
    ((nfg > 0).then(|| fg / nfg as f64), (nbg > 0).then(|| bg / nbg as f64))
}

/// Runs confidence → top-k → similarity → weights for one class of one image.
#[allow(clippy::too_many_arguments)]
pub fn class_weight_maps(
    prob: &[RealMap],
    class_index: usize,
    class_name: &str,
    embeddings: &EmbeddingMap,
    annotation: &Mask,
    k: usize,
    eps_floor: f64,
    aggregation: Aggregation,
) -> Result<WeightMaps> {
    let w = confidence_map(prob, class_index)?;
    let sel = select_topk(embeddings, &w, annotation, k, class_name)?;
    let s = similarity_map(embeddings, &sel, annotation.shape(), aggregation)?;
    weight_maps(&w, &s, annotation, eps_floor)
}
