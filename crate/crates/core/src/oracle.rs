//! Brute-force reference implementations used only by tests.
//!
//! Each function here follows the textbook definition as literally as
//! possible and shares no code path with the production implementation.

use std::collections::{BTreeSet, HashSet};

use crate::grid::{EmbeddingMap, LabelMap, Mask, RealMap};
use crate::mocl::{TopKEntry, WeightMaps};

fn pixel_set(mask: &Mask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.at(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn dice(pred: &Mask, gt: &Mask) -> f64 {
    let p = pixel_set(pred);
    let g = pixel_set(gt);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    let p = pixel_set(pred);
    let g = pixel_set(gt);
    let union = p.union(&g).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&g).count() as f64 / union as f64
}

fn labels_of(map: &LabelMap) -> BTreeSet<u32> {
    map.as_slice().iter().copied().filter(|&l| l != 0).collect()
}

fn region(map: &LabelMap, label: u32) -> HashSet<usize> {
    map.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| i)
        .collect()
}

/// Aggregated Jaccard Index, scanning every (GT, prediction) pair.
pub fn aji(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let gts = labels_of(gt);
    let preds = labels_of(pred);
    if gts.is_empty() && preds.is_empty() {
        return 1.0;
    }
    let mut used = BTreeSet::new();
    let (mut c, mut u) = (0usize, 0usize);
    for &g in &gts {
        let gr = region(gt, g);
        let mut best: Option<(f64, u32, usize, usize)> = None;
        for &p in &preds {
            let pr = region(pred, p);
            let inter = gr.intersection(&pr).count();
            if inter == 0 {
                continue;
            }
            let union = gr.union(&pr).count();
            let v = inter as f64 / union as f64;
            if best.map_or(true, |b| v > b.0) {
                best = Some((v, p, inter, union));
            }
        }
        match best {
            Some((_, p, inter, union)) => {
                c += inter;
                u += union;
                used.insert(p);
            }
            None => u += gr.len(),
        }
    }
    for &p in &preds {
        if !used.contains(&p) {
            u += region(pred, p).len();
        }
    }
    c as f64 / u as f64
}

/// Mean IoU of each GT instance with its best-overlapping prediction (0 when none).
pub fn mean_best_iou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let gts = labels_of(gt);
    if gts.is_empty() {
        return 1.0;
    }
    let preds = labels_of(pred);
    let mut total = 0.0;
    for &g in &gts {
        let gr = region(gt, g);
        let best = preds
            .iter()
            .map(|&p| {
                let pr = region(pred, p);
                gr.intersection(&pr).count() as f64 / gr.union(&pr).count() as f64
            })
            .fold(0.0, f64::max);
        total += best;
    }
    total / gts.len() as f64
}

/// Pooled IoU over GT instances and their best-overlapping prediction:
/// summed intersections over summed unions, with no penalty for unused
/// predictions.
pub fn pooled_best_iou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let gts = labels_of(gt);
    if gts.is_empty() {
        return 1.0;
    }
    let preds = labels_of(pred);
    let (mut c, mut u) = (0usize, 0usize);
    for &g in &gts {
        let gr = region(gt, g);
        let mut best = (0.0, 0usize, gr.len());
        for &p in &preds {
            let pr = region(pred, p);
            let inter = gr.intersection(&pr).count();
            let union = gr.union(&pr).count();
            let v = inter as f64 / union as f64;
            if inter > 0 && v > best.0 {
                best = (v, inter, union);
            }
        }
        c += best.1;
        u += best.2;
    }
    c as f64 / u as f64
}

/// Instance F1 by repeatedly taking the highest-IoU unused pair.
pub fn instance_f1(pred: &LabelMap, gt: &LabelMap, thresh: f64) -> (f64, f64, f64) {
    let gts: Vec<u32> = labels_of(gt).into_iter().collect();
    let preds: Vec<u32> = labels_of(pred).into_iter().collect();
    if gts.is_empty() && preds.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let mut table = vec![vec![0.0; preds.len()]; gts.len()];
    for (i, &g) in gts.iter().enumerate() {
        let gr = region(gt, g);
        for (j, &p) in preds.iter().enumerate() {
            let pr = region(pred, p);
            table[i][j] = gr.intersection(&pr).count() as f64 / gr.union(&pr).count() as f64;
        }
    }
    let mut gt_free = vec![true; gts.len()];
    let mut pred_free = vec![true; preds.len()];
    let mut tp = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..gts.len() {
            for j in 0..preds.len() {
                if gt_free[i] && pred_free[j] && table[i][j] >= thresh && table[i][j] > 0.0 {
                    if best.map_or(true, |b| table[i][j] > b.0) {
                        best = Some((table[i][j], i, j));
                    }
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        gt_free[i] = false;
        pred_free[j] = false;
        tp += 1;
    }
    let fp = preds.len() - tp;
    let fneg = gts.len() - tp;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    let precision = if preds.is_empty() {
        0.0
    } else {
        tp as f64 / preds.len() as f64
    };
    let recall = if gts.is_empty() {
        0.0
    } else {
        tp as f64 / gts.len() as f64
    };
    (f1, precision, recall)
}

/// ROC AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pixel_auc(prob: &RealMap, gt: &Mask) -> f64 {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&p, &g) in prob.as_slice().iter().zip(gt.as_slice()) {
        if g {
            pos.push(p)
        } else {
            neg.push(p)
        }
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Two-sided exact signed-rank p-value by enumerating all `2ⁿ` sign patterns.
pub fn wilcoxon_enumerated(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    // average ranks by counting, doubled to stay integral
    let ranks2: Vec<u64> = abs
        .iter()
        .map(|&v| {
            let less = abs.iter().filter(|&&o| o < v).count() as u64;
            let equal = abs.iter().filter(|&&o| o == v).count() as u64;
            2 * less + equal + 1
        })
        .collect();
    let total2: u64 = ranks2.iter().sum();
    let wplus2: u64 = ranks2.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let stat2 = wplus2.min(total2 - wplus2);
    let mut below = 0u64;
    for pattern in 0u64..(1u64 << n) {
        let s: u64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks2[i]).sum();
        if s <= stat2 {
            below += 1;
        }
    }
    let p = (2.0 * below as f64 / (1u64 << n) as f64).min(1.0);
    (stat2 as f64 / 2.0, p)
}

/// Top-k by repeated arg-max (first index wins ties).
pub fn topk(embeddings: &EmbeddingMap, w: &RealMap, y: &Mask, k: usize) -> Vec<TopKEntry> {
    assert_eq!(w.shape(), embeddings.shape(), "oracle expects matching grids");
    let mut taken = vec![false; w.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..w.len() {
            if taken[i] || !y.as_slice()[i] {
                continue;
            }
            if best.map_or(true, |b| w.as_slice()[i] > w.as_slice()[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        taken[i] = true;
        let (r, c) = (i / w.width(), i % w.width());
        out.push(TopKEntry {
            embedding: embeddings.vector(r, c).to_vec(),
            confidence: w.as_slice()[i],
            location: (r, c),
        });
    }
    out
}

/// Mean pairwise cosine between `e` and each selected embedding.
pub fn mean_cosine(e: &[f64], selection: &[TopKEntry]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(e) == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in selection {
        let n = norm(&s.embedding);
        if n == 0.0 {
            continue;
        }
        let num: f64 = e.iter().zip(&s.embedding).map(|(a, b)| a * b).sum();
        total += num / (norm(e) * n);
    }
    total / selection.len() as f64
}

/// Pixel-by-pixel evaluation of weighted soft-Dice + weighted BCE.
pub fn weighted_loss(y: &Mask, p: &RealMap, weights: &WeightMaps) -> f64 {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    let mut bce = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        let o = weights.omega_w.as_slice()[i] * weights.omega_s.as_slice()[i];
        let pi = p.as_slice()[i].clamp(1e-7, 1.0 - 1e-7);
        let yi = if y.as_slice()[i] { 1.0 } else { 0.0 };
        a += o * pi * yi;
        b += o * pi;
        c += o * yi;
        bce += o * -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln());
        total += o;
    }
    1.0 - (2.0 * a + 1.0) / (b + c + 1.0) + bce / f64::max(total, 1.0)
}

/// Central finite-difference gradient of `f` at `p`.
pub fn finite_difference(p: &RealMap, h: f64, f: impl Fn(&RealMap) -> f64) -> RealMap {
    let mut grad = RealMap::new(p.height(), p.width());
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = p.clone();
        minus.as_mut_slice()[i] -= h;
        grad.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}
