//! Pixel- and instance-level segmentation metrics and the paired
//! Wilcoxon signed-rank test.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::components::{fill_holes, label_areas, label_components, relabel_sequential, Connectivity};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, Mask, RealMap};

pub const DEFAULT_INSTANCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_INSTANCE_MIN_SIZE: usize = 10;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BEST_F1_STEP: f64 = 0.01;
pub const EXACT_WILCOXON_MAX_N: usize = 25;

fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    pred.ensure_same_shape(gt, "prediction vs ground truth")?;
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Pixel precision and recall of `pred` against `gt`; an empty denominator yields 1
/// when the other side is empty too, else 0.
pub fn precision_recall(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let ratio = |num: usize, den: usize, other: usize| {
        if den == 0 {
            if other == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Ok((ratio(i, p, g), ratio(i, g, p)))
}

/// Threshold → 8-connected components → drop small → fill holes → relabel.
pub fn instances_from_prob(prob: &RealMap, threshold: f64, min_size: usize) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let fg = prob.map(|&p| p >= threshold);
    let (labels, _) = label_components(&fg, Connectivity::Eight);
    let areas = label_areas(&labels);
    let kept = labels.map(|&l| if l != 0 && areas[l as usize] >= min_size { l } else { 0 });
    Ok(relabel_sequential(&fill_holes(&kept)).0)
}

/// Instances of a binary mask as 8-connected components.
pub fn instances_from_mask(mask: &Mask) -> LabelMap {
    label_components(mask, Connectivity::Eight).0
}

/// Sparse intersection table between two label maps.
struct Contingency {
    pred_area: Vec<usize>,
    gt_area: Vec<usize>,
    /// (gt, pred) → intersection, both labels ≥ 1
    inter: HashMap<(u32, u32), usize>,
}

impl Contingency {
    fn new(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        pred.ensure_same_shape(gt, "prediction vs ground truth")?;
        let mut inter = HashMap::new();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if p != 0 && g != 0 {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
        Ok(Self {
            pred_area: label_areas(pred),
            gt_area: label_areas(gt),
            inter,
        })
    }

    fn iou(&self, g: u32, p: u32, i: usize) -> f64 {
        let union = self.gt_area[g as usize] + self.pred_area[p as usize] - i;
        i as f64 / union as f64
    }

    fn labels(areas: &[usize]) -> impl Iterator<Item = u32> + '_ {
        areas
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &a)| a > 0)
            .map(|(l, _)| l as u32)
    }
}

/// Aggregated Jaccard Index: each ground-truth instance is paired with the
/// prediction of highest IoU; unpaired prediction pixels join the union.
pub fn aji(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let table = Contingency::new(pred, gt)?;
    let mut per_gt: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
    for (&(g, p), &i) in &table.inter {
        per_gt.entry(g).or_default().push((p, i));
    }
    let mut used = vec![false; table.pred_area.len()];
    let (mut c, mut u) = (0usize, 0usize);
    for g in Contingency::labels(&table.gt_area) {
        let best = per_gt.get(&g).and_then(|cands| {
            cands.iter().copied().max_by(|a, b| {
                table
                    .iou(g, a.0, a.1)
                    .total_cmp(&table.iou(g, b.0, b.1))
                    .then(b.0.cmp(&a.0))
            })
        });
        match best {
            Some((p, i)) => {
                c += i;
                u += table.gt_area[g as usize] + table.pred_area[p as usize] - i;
                used[p as usize] = true;
            }
            None => u += table.gt_area[g as usize],
        }
    }
    for p in Contingency::labels(&table.pred_area) {
        if !used[p as usize] {
            u += table.pred_area[p as usize];
        }
    }
    if u == 0 {
        return Ok(1.0);
    }
    Ok(c as f64 / u as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Detection F1 with greedy one-to-one matching in descending IoU order.
pub fn instance_f1(pred: &LabelMap, gt: &LabelMap, iou_thresh: f64) -> Result<InstanceScores> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1), got {iou_thresh}"
        )));
    }
    let table = Contingency::new(pred, gt)?;
    let n_pred = Contingency::labels(&table.pred_area).count();
    let n_gt = Contingency::labels(&table.gt_area).count();
    let mut pairs: Vec<(f64, u32, u32)> = table
        .inter
        .iter()
        .map(|(&(g, p), &i)| (table.iou(g, p, i), g, p))
        .filter(|&(v, _, _)| v >= iou_thresh)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; table.gt_area.len()];
    let mut pred_used = vec![false; table.pred_area.len()];
    let mut tp = 0;
    for (_, g, p) in pairs {
        if !gt_used[g as usize] && !pred_used[p as usize] {
            gt_used[g as usize] = true;
            pred_used[p as usize] = true;
            tp += 1;
        }
    }
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    if n_pred == 0 && n_gt == 0 {
        return Ok(InstanceScores {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            tp,
            fp,
            fn_,
        });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(InstanceScores {
        f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        precision: ratio(tp, n_pred),
        recall: ratio(tp, n_gt),
        tp,
        fp,
        fn_,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC from the Mann–Whitney rank statistic with tie-averaged ranks.
pub fn pixel_auc(prob: &RealMap, gt: &Mask) -> Result<f64> {
    prob.ensure_same_shape(gt, "prob vs ground truth")?;
    let n_pos = gt.count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let ranks = average_ranks(prob.as_slice());
    let rank_sum: f64 = ranks
        .iter()
        .zip(gt.as_slice())
        .filter(|(_, &g)| g)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `k · step` rounded to 1e-9 so grid points land on their decimal values.
fn grid_threshold(k: usize, step: f64) -> f64 {
    (k as f64 * step * 1e9).round() / 1e9
}

/// Best pixel F1 over thresholds `step, 2·step, …, < 1`; ties keep the lowest threshold.
pub fn best_f1(prob: &RealMap, gt: &Mask, step: f64) -> Result<(f64, f64)> {
    prob.ensure_same_shape(gt, "prob vs ground truth")?;
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!("step must lie in (0, 1), got {step}")));
    }
    let n_gt = gt.count();
    let first = grid_threshold(1, step);
    if n_gt == 0 {
        return Ok((0.0, first));
    }
    let mut best = (f64::NEG_INFINITY, first);
    let mut k = 1;
    loop {
        let t = grid_threshold(k, step);
        if t > 1.0 - step / 2.0 {
            break;
        }
        let (mut tp, mut np) = (0usize, 0usize);
        for (&p, &g) in prob.as_slice().iter().zip(gt.as_slice()) {
            if p >= t {
                np += 1;
                tp += g as usize;
            }
        }
        let f1 = 2.0 * tp as f64 / (np + n_gt) as f64;
        if f1 > best.0 {
            best = (f1, t);
        }
        k += 1;
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    Exact,
    Approx,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
}

/// Paired two-sided Wilcoxon signed-rank test on `a − b`; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "paired samples need equal non-zero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Approx => false,
        WilcoxonMode::Auto => n <= EXACT_WILCOXON_MAX_N,
    };
    let p_value = if exact {
        exact_p(&ranks, statistic)
    } else {
        normal_p(&abs, n, statistic)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n,
        exact,
    })
}

/// Counts sign assignments with `W+ ≤ statistic` by dynamic programming over
/// doubled (integer) ranks; equivalent to enumerating all `2ⁿ` assignments.
fn exact_p(ranks: &[f64], statistic: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let cut = (statistic * 2.0).round() as usize;
    let below: f64 = counts[..=cut.min(max)].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * below / all).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, statistic: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    /// `None` when every paired difference is zero.
    pub p_value: Option<f64>,
    pub statistic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    #[serde(default)]
    pub method: String,
    pub per_image: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<String, Aggregate>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    /// Rebuilds `aggregate` (population std) from `per_image`.
    pub fn recompute_aggregate(&mut self) {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for metrics in self.per_image.values() {
            for (k, v) in metrics {
                cols.entry(k.clone()).or_default().push(*v);
            }
        }
        self.aggregate = cols
            .into_iter()
            .map(|(k, vals)| {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (
                    k,
                    Aggregate {
                        mean,
                        std: var.sqrt(),
                        n: vals.len(),
                    },
                )
            })
            .collect();
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|a| a.mean)
    }

    /// Per-image values of `metric` for the images present in both reports,
    /// in image-id order.
    pub fn paired_values(&self, other: &MetricsReport, metric: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let ids_a: Vec<&String> = self.per_image.keys().collect();
        let ids_b: Vec<&String> = other.per_image.keys().collect();
        if ids_a != ids_b {
            return Err(Error::InvalidArgument(
                "reports were computed on different image sets".into(),
            ));
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for id in ids_a {
            if let (Some(x), Some(y)) = (self.per_image[id].get(metric), other.per_image[id].get(metric)) {
                a.push(*x);
                b.push(*y);
            }
        }
        Ok((a, b))
    }
}

/// Paired Wilcoxon comparison of two reports on one metric.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, metric: &str) -> Result<Comparison> {
    let (xa, xb) = a.paired_values(b, metric)?;
    if xa.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metric `{metric}` missing from reports"
        )));
    }
    let (p_value, statistic) = match wilcoxon_signed_rank(&xa, &xb, WilcoxonMode::Auto) {
        Ok(r) => (Some(r.p_value), Some(r.statistic)),
        Err(Error::DegenerateSample) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        metric: metric.to_string(),
        p_value,
        statistic,
    })
}
