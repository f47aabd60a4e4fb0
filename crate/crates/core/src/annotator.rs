//! Box-prompted conversion of weak annotations into pixel-level instance masks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::components::{closing3, largest_component};
use crate::data_ingest::BoxAnnotation;
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, Mask, RgbImage};
use crate::io;

/// A model that turns one box prompt into a binary mask.
///
/// Implementations must return a mask of the image's shape that is zero
/// outside the box, and must be stateless across calls.
pub trait PromptableBackend: Send + Sync {
    fn name(&self) -> &str;

    fn segment(&self, image: &RgbImage, prompt: &BoxAnnotation) -> Result<Mask>;
}

/// Deterministic classical backend: Otsu split inside the box, the side
/// least present on the box border as foreground, largest component, 3×3 closing.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinBackend;

impl PromptableBackend for BuiltinBackend {
    fn name(&self) -> &str {
        "builtin"
    }

    fn segment(&self, image: &RgbImage, prompt: &BoxAnnotation) -> Result<Mask> {
        builtin_segment(image, prompt)
    }
}

/// Otsu threshold over an 8-bit histogram; `None` when no split separates
/// the values (uniform input).
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.filter(|&(_, b)| b > 0.0).map(|(t, _)| t)
}

pub fn builtin_segment(image: &RgbImage, prompt: &BoxAnnotation) -> Result<Mask> {
    let (h, w) = image.shape();
    prompt.check_bounds(h, w)?;
    let mut out = Mask::new(h, w);
    if prompt.area() < 4 {
        return Ok(out);
    }
    let (bh, bw) = (prompt.height(), prompt.width());
    let gray = image.crop(prompt.y0, prompt.x0, bh, bw)?.to_gray_u8();
    let Some(t) = otsu_threshold(gray.as_slice()) else {
        return Ok(out);
    };

    // border pixels are presumed background: the side of the split with the
    // smaller share of its pixels on the box border is foreground
    let (mut hi_n, mut hi_ring, mut lo_n, mut lo_ring) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..bh {
        for x in 0..bw {
            let ring = y == 0 || x == 0 || y + 1 == bh || x + 1 == bw;
            let r = if ring { 1.0 } else { 0.0 };
            if gray.at(y, x) > t {
                hi_n += 1.0;
                hi_ring += r;
            } else {
                lo_n += 1.0;
                lo_ring += r;
            }
        }
    }
    let hi_is_fg = hi_ring / hi_n < lo_ring / lo_n;
    let part = gray.map(|&v| (v > t) == hi_is_fg);
    let local = closing3(&largest_component(&part));
    out.paste(prompt.y0, prompt.x0, &local);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `None` when the backend returned nothing for the box or every pixel
    /// was claimed by a smaller overlapping instance.
    pub instance_id: Option<u32>,
    #[serde(rename = "box")]
    pub prompt: BoxAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAnnotation {
    pub class_masks: BTreeMap<String, Mask>,
    pub instance_map: LabelMap,
    pub provenance: Vec<Provenance>,
}

impl PixelAnnotation {
    pub fn empty(shape: (usize, usize)) -> Self {
        Self {
            class_masks: BTreeMap::new(),
            instance_map: LabelMap::new(shape.0, shape.1),
            provenance: Vec::new(),
        }
    }

    /// Builds an annotation directly from per-class masks (complete labels).
    pub fn from_class_masks(class_masks: BTreeMap<String, Mask>, shape: (usize, usize)) -> Self {
        use crate::components::{label_components, Connectivity};
        let mut instance_map = LabelMap::new(shape.0, shape.1);
        let mut next = 0u32;
        for mask in class_masks.values() {
            let (labels, n) = label_components(mask, Connectivity::Eight);
            for (dst, &l) in instance_map.as_mut_slice().iter_mut().zip(labels.as_slice()) {
                if l != 0 && *dst == 0 {
                    *dst = next + l;
                }
            }
            next += n as u32;
        }
        Self {
            class_masks,
            instance_map,
            provenance: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.instance_map.shape()
    }

    /// The class mask, or all-background when the class has no instances.
    pub fn mask_for(&self, class: &str) -> Mask {
        self.class_masks
            .get(class)
            .cloned()
            .unwrap_or_else(|| Mask::new(self.shape().0, self.shape().1))
    }

    pub fn num_instances(&self) -> usize {
        self.instance_map.as_slice().iter().copied().max().unwrap_or(0) as usize
    }

    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        let mut class_masks = BTreeMap::new();
        for (k, m) in &self.class_masks {
            class_masks.insert(k.clone(), m.crop(y, x, size, size)?);
        }
        Ok(Self {
            class_masks,
            instance_map: self.instance_map.crop(y, x, size, size)?,
            provenance: Vec::new(),
        })
    }

    /// Writes `masks/<class>.png`, `instances.png` (16-bit) and `provenance.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (class, m) in &self.class_masks {
            io::write_mask(&dir.join("masks").join(format!("{class}.png")), m)?;
        }
        io::write_label_map(&dir.join("instances.png"), &self.instance_map)?;
        io::write_json(&dir.join("provenance.json"), &self.provenance)
    }

    pub fn read(dir: &Path, classes: &[String]) -> Result<Self> {
        let instance_map = io::read_label_map(&dir.join("instances.png"))?;
        let mut class_masks = BTreeMap::new();
        for c in classes {
            let p = dir.join("masks").join(format!("{c}.png"));
            if p.exists() {
                class_masks.insert(c.clone(), io::read_mask(&p)?);
            }
        }
        let provenance = io::read_json(&dir.join("provenance.json"))?;
        Ok(Self {
            class_masks,
            instance_map,
            provenance,
        })
    }
}

/// Segments each box with `backend`, one instance per box.
///
/// Pixels claimed by several instances go to the one with the smaller
/// backend area; equal areas go to the lower instance id.
pub fn segment_boxes(
    image: &RgbImage,
    boxes: &[BoxAnnotation],
    backend: &dyn PromptableBackend,
) -> Result<PixelAnnotation> {
    let (h, w) = image.shape();
    for b in boxes {
        b.check_bounds(h, w)?;
    }
    let mut candidates: Vec<(usize, Mask, usize)> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let mut m = backend.segment(image, b)?;
        if m.shape() != (h, w) {
            return Err(Error::Backend(format!(
                "{} returned {:?} mask for {h}x{w} image",
                backend.name(),
                m.shape()
            )));
        }
        // enforce the within-box contract regardless of backend
        for y in 0..h {
            for x in 0..w {
                if m.at(y, x) && !b.contains(y, x) {
                    m.set(y, x, false);
                }
            }
        }
        let area = m.count();
        if area > 0 {
            candidates.push((i, m, area));
        }
    }

    // owner[p] = index into candidates
    let mut owner: Grid<Option<usize>> = Grid::new(h, w);
    for (ci, (_, m, area)) in candidates.iter().enumerate() {
        for (p, &on) in m.as_slice().iter().enumerate() {
            if !on {
                continue;
            }
            let slot = &mut owner.as_mut_slice()[p];
            match *slot {
                Some(o) if candidates[o].2 <= *area => {}
                _ => *slot = Some(ci),
            }
        }
    }

    let mut survived = vec![false; candidates.len()];
    for o in owner.as_slice().iter().flatten() {
        survived[*o] = true;
    }
    let mut new_id = vec![0u32; candidates.len()];
    let mut next = 0;
    for (ci, s) in survived.iter().enumerate() {
        if *s {
            next += 1;
            new_id[ci] = next;
        }
    }

    let instance_map = owner.map(|o| o.map_or(0, |ci| new_id[ci]));
    let mut class_masks: BTreeMap<String, Mask> = BTreeMap::new();
    for b in boxes {
        class_masks
            .entry(b.class_name.clone())
            .or_insert_with(|| Mask::new(h, w));
    }
    for (p, o) in owner.as_slice().iter().enumerate() {
        if let Some(ci) = o {
            let class = &boxes[candidates[*ci].0].class_name;
            class_masks.get_mut(class).expect("class registered").as_mut_slice()[p] = true;
        }
    }

    let mut provenance: Vec<Provenance> = boxes
        .iter()
        .map(|b| Provenance {
            instance_id: None,
            prompt: b.clone(),
        })
        .collect();
    for (ci, (bi, _, _)) in candidates.iter().enumerate() {
        if survived[ci] {
            provenance[*bi].instance_id = Some(new_id[ci]);
        }
    }

    Ok(PixelAnnotation {
        class_masks,
        instance_map,
        provenance,
    })
}
