//! Dataset manifests, splits, subsampling, IF-derived masks, box extraction and tiling.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{label_bboxes, remove_small_components};
use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid, LabelMap, Mask, RgbImage};
use crate::io;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_IF_MIN_SIZE: usize = 10;
pub const DEFAULT_JITTER_FRAC: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Normal,
    Injured,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub if_paths: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mask_paths: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_path: Option<PathBuf>,
    #[serde(default)]
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub root_path: PathBuf,
    /// Class names in model-output channel order.
    #[serde(default)]
    pub classes: Vec<String>,
    /// Per-marker IF intensity threshold.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub if_thresholds: BTreeMap<String, f64>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root_path.join(p)
        }
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Class order: declared `classes`, else the sorted union of mask class names.
    pub fn class_names(&self) -> Vec<String> {
        if !self.classes.is_empty() {
            return self.classes.clone();
        }
        let mut set: Vec<String> = self
            .samples
            .iter()
            .flat_map(|s| s.mask_paths.keys().cloned())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }

    /// Decodes every raster referenced by `record`.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<PatchSample> {
        let image = io::read_rgb(&self.resolve(&record.image_path))?;
        let mut if_channels = BTreeMap::new();
        for (name, p) in &record.if_paths {
            if_channels.insert(name.clone(), io::read_gray(&self.resolve(p))?);
        }
        let mut class_masks = BTreeMap::new();
        for (name, p) in &record.mask_paths {
            class_masks.insert(name.clone(), io::read_mask(&self.resolve(p))?);
        }
        let boxes = match &record.box_path {
            Some(p) => io::read_boxes(&self.resolve(p))?,
            None => Vec::new(),
        };
        let sample = PatchSample {
            id: record.id.clone(),
            image,
            if_channels,
            class_masks,
            boxes,
            stratum: record.stratum,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_by_id(&self, id: &str) -> Result<PatchSample> {
        let record = self
            .sample(id)
            .ok_or_else(|| Error::Manifest(format!("unknown sample id `{id}`")))?;
        self.load_sample(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    Tight,
    Random,
    Human,
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "BoxWire", try_from = "BoxWire")]
pub struct BoxAnnotation {
    pub class_name: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub source: BoxSource,
}

#[derive(Serialize, Deserialize)]
struct BoxWire {
    class: String,
    bbox: [usize; 4],
    source: BoxSource,
}

impl From<BoxAnnotation> for BoxWire {
    fn from(b: BoxAnnotation) -> Self {
        BoxWire {
            class: b.class_name,
            bbox: [b.x0, b.y0, b.x1, b.y1],
            source: b.source,
        }
    }
}

impl TryFrom<BoxWire> for BoxAnnotation {
    type Error = Error;

    fn try_from(w: BoxWire) -> Result<Self> {
        let [x0, y0, x1, y1] = w.bbox;
        BoxAnnotation::new(w.class, x0, y0, x1, y1, w.source)
    }
}

impl BoxAnnotation {
    pub fn new(
        class_name: impl Into<String>,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        source: BoxSource,
    ) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!("empty box [{x0},{y0},{x1},{y1}]")));
        }
        Ok(Self {
            class_name: class_name.into(),
            x0,
            y0,
            x1,
            y1,
            source,
        })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.x1 > width || self.y1 > height {
            return Err(Error::Bounds(format!(
                "{} box [{},{},{},{}] exceeds {}x{} image",
                self.class_name, self.x0, self.y0, self.x1, self.y1, height, width
            )));
        }
        Ok(())
    }
}

/// One aligned training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub id: String,
    pub image: RgbImage,
    pub if_channels: BTreeMap<String, GrayImage>,
    pub class_masks: BTreeMap<String, Mask>,
    pub boxes: Vec<BoxAnnotation>,
    pub stratum: Stratum,
}

impl PatchSample {
    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        for (name, img) in &self.if_channels {
            if img.shape() != shape {
                return Err(fail(format!("IF `{name}` is {:?}, image is {shape:?}", img.shape())));
            }
        }
        for (name, m) in &self.class_masks {
            if m.shape() != shape {
                return Err(fail(format!("mask `{name}` is {:?}, image is {shape:?}", m.shape())));
            }
        }
        for b in &self.boxes {
            b.check_bounds(shape.0, shape.1).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }
}

/// Reads `manifest_file`, resolves paths against `root` and validates every record.
pub fn load_manifest(root: &Path, manifest_file: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(manifest_file).map_err(|e| Error::io(manifest_file, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", manifest_file.display())))?;
    manifest.root_path = root.to_path_buf();
    validate_manifest(&manifest)?;
    Ok(manifest)
}

pub fn validate_manifest(manifest: &DatasetManifest) -> Result<()> {
    let mut seen = HashSet::new();
    for s in &manifest.samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Validation {
                id: s.id.clone(),
                message: "duplicate sample id".into(),
            });
        }
    }
    for s in &manifest.samples {
        let fail = |message: String| Error::Validation {
            id: s.id.clone(),
            message,
        };
        let shape = io::image_shape(&manifest.resolve(&s.image_path)).map_err(|e| fail(e.to_string()))?;
        let others = s.if_paths.iter().chain(s.mask_paths.iter());
        for (name, p) in others {
            let other = io::image_shape(&manifest.resolve(p)).map_err(|e| fail(e.to_string()))?;
            if other != shape {
                return Err(fail(format!("`{name}` is {other:?}, image is {shape:?}")));
            }
        }
        if let Some(p) = &s.box_path {
            let boxes = io::read_boxes(&manifest.resolve(p)).map_err(|e| fail(e.to_string()))?;
            for b in boxes {
                b.check_bounds(shape.0, shape.1).map_err(|e| fail(e.to_string()))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleUnit {
    Sample,
    #[default]
    Patch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: (u32, u32, u32),
    /// What the ids in `train` denote.
    #[serde(default = "sample_unit")]
    pub unit: SubsampleUnit,
}

fn sample_unit() -> SubsampleUnit {
    SubsampleUnit::Sample
}

/// Floor each share, remainder to train.
fn split_sizes(n: usize, ratios: (u32, u32, u32)) -> (usize, usize, usize) {
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    let val = n * ratios.1 as usize / total;
    let test = n * ratios.2 as usize / total;
    (n - val - test, val, test)
}

pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (u32, u32, u32),
    seed: u64,
    stratify: bool,
) -> Result<SplitAssignment> {
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratios must be positive, got {ratios:?}"
        )));
    }
    if manifest.samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty manifest".into()));
    }
    let mut groups: BTreeMap<Stratum, Vec<String>> = BTreeMap::new();
    for s in &manifest.samples {
        let key = if stratify { s.stratum } else { Stratum::Unknown };
        groups.entry(key).or_default().push(s.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (stratum, mut ids) in groups {
        if stratify && ids.len() < 3 {
            return Err(Error::Stratification(format!(
                "stratum {stratum:?} has {} samples, need at least 3",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let (ntr, nva, _) = split_sizes(ids.len(), ratios);
        test.extend(ids.split_off(ntr + nva));
        val.extend(ids.split_off(ntr));
        train.extend(ids);
    }
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitAssignment {
        train,
        val,
        test,
        seed,
        ratios,
        unit: SubsampleUnit::Sample,
    })
}

/// Number of units kept: `max(1, round(fraction · n))`.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

pub fn subsample_training(
    split: &SplitAssignment,
    fraction: f64,
    seed: u64,
    unit: SubsampleUnit,
) -> Result<SplitAssignment> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if split.unit != unit {
        return Err(Error::InvalidArgument(format!(
            "split holds {:?} units but {unit:?} subsampling was requested",
            split.unit
        )));
    }
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut out = split.clone();
    if fraction < 1.0 {
        let keep = subsample_count(split.train.len(), fraction);
        let mut ids = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        ids.truncate(keep);
        ids.sort();
        out.train = ids;
    }
    Ok(out)
}

/// Identifier of a tile inside a sample: `"<sample>@<y>_<x>"`.
pub fn patch_id(sample_id: &str, tile: &TileCoord) -> String {
    format!("{sample_id}@{}_{}", tile.y, tile.x)
}

/// Inverse of [`patch_id`]; plain sample ids yield `None` for the offset.
pub fn parse_patch_id(id: &str) -> (String, Option<(usize, usize)>) {
    if let Some((sample, pos)) = id.rsplit_once('@') {
        if let Some((y, x)) = pos.split_once('_') {
            if let (Ok(y), Ok(x)) = (y.parse(), x.parse()) {
                return (sample.to_string(), Some((y, x)));
            }
        }
    }
    (id.to_string(), None)
}

/// Replaces the sample ids of the training list with the ids of their tiles.
pub fn expand_to_patches(
    split: &SplitAssignment,
    mut tiles_of: impl FnMut(&str) -> Result<Vec<TileCoord>>,
) -> Result<SplitAssignment> {
    if split.unit == SubsampleUnit::Patch {
        return Ok(split.clone());
    }
    let mut train = Vec::new();
    for id in &split.train {
        for t in tiles_of(id)? {
            train.push(patch_id(id, &t));
        }
    }
    Ok(SplitAssignment {
        train,
        unit: SubsampleUnit::Patch,
        ..split.clone()
    })
}

/// `(image ≥ threshold)` with 8-connected components under `min_size` removed.
pub fn derive_mask_from_if<T: Copy + Into<f64>>(if_image: &Grid<T>, threshold: f64, min_size: usize) -> Mask {
    let raw = if_image.map(|&v| v.into() >= threshold);
    remove_small_components(&raw, min_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    Tight,
    Random,
}

fn check_jitter(mode: BoxMode, jitter_frac: f64) -> Result<()> {
    if !(jitter_frac >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "jitter_frac must be ≥ 0, got {jitter_frac}"
        )));
    }
    if mode == BoxMode::Random && jitter_frac <= 0.0 {
        return Err(Error::InvalidArgument("random boxes need jitter_frac > 0".into()));
    }
    Ok(())
}

/// Displaces each side of `b` by up to `jitter_frac` of its side length,
/// clipped to a `height × width` image. A side pair that would collapse keeps
/// its original extent.
fn jitter_box(
    b: &BoxAnnotation,
    jitter_frac: f64,
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
) -> Result<BoxAnnotation> {
    let (x0, y0, x1, y1) = (b.x0, b.y0, b.x1, b.y1);
    let bw = (x1 - x0) as f64;
    let bh = (y1 - y0) as f64;
    // truncation keeps every displacement within jitter_frac · side
    let mut shift = |side: f64| -> isize {
        let r = jitter_frac * side;
        rng.random_range(-r..=r).trunc() as isize
    };
    let (dx0, dy0, dx1, dy1) = (shift(bw), shift(bh), shift(bw), shift(bh));
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut nx0 = clip(x0 as isize + dx0, width);
    let mut nx1 = clip(x1 as isize + dx1, width);
    let mut ny0 = clip(y0 as isize + dy0, height);
    let mut ny1 = clip(y1 as isize + dy1, height);
    if nx0 >= nx1 {
        (nx0, nx1) = (x0, x1);
    }
    if ny0 >= ny1 {
        (ny0, ny1) = (y0, y1);
    }
    BoxAnnotation::new(b.class_name.clone(), nx0, ny0, nx1, ny1, BoxSource::Random)
}

pub fn boxes_from_mask(
    instance_mask: &LabelMap,
    class_name: &str,
    mode: BoxMode,
    jitter_frac: f64,
    seed: u64,
) -> Result<Vec<BoxAnnotation>> {
    check_jitter(mode, jitter_frac)?;
    let (h, w) = instance_mask.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (y0, x0, y1, x1) in label_bboxes(instance_mask).into_iter().flatten() {
        let tight = BoxAnnotation::new(class_name, x0, y0, x1, y1, BoxSource::Tight)?;
        out.push(match mode {
            BoxMode::Tight => tight,
            BoxMode::Random => jitter_box(&tight, jitter_frac, &mut rng, h, w)?,
        });
    }
    Ok(out)
}

/// Random-mode displacement applied to existing boxes, e.g. tight boxes read
/// from a manifest.
pub fn jitter_boxes(
    boxes: &[BoxAnnotation],
    jitter_frac: f64,
    seed: u64,
    shape: (usize, usize),
) -> Result<Vec<BoxAnnotation>> {
    check_jitter(BoxMode::Random, jitter_frac)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    boxes
        .iter()
        .map(|b| {
            b.check_bounds(shape.0, shape.1)?;
            jitter_box(b, jitter_frac, &mut rng, shape.0, shape.1)
        })
        .collect()
}

/// Top-left corner and edge length of a square tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut p = 0;
    loop {
        if p + tile >= len {
            let last = len - tile;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            break;
        }
        starts.push(p);
        p += stride;
    }
    starts
}

/// Row-major tile grid over an `height × width` image; the last row and
/// column are anchored to the image edge.
pub fn tile_image(shape: (usize, usize), tile: usize, stride: usize) -> Result<Vec<TileCoord>> {
    let (h, w) = shape;
    if tile == 0 || stride == 0 {
        return Err(Error::InvalidArgument("tile and stride must be positive".into()));
    }
    if stride > tile {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} exceeds tile {tile} and would leave gaps"
        )));
    }
    if tile > h.min(w) {
        return Err(Error::InvalidArgument(format!("tile {tile} exceeds image {h}x{w}")));
    }
    let ys = tile_starts(h, tile, stride);
    let xs = tile_starts(w, tile, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| TileCoord { y, x, size: tile }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{label_components, Connectivity};
    use proptest::prelude::*;
    use rand::Rng;

    fn manifest_with(n: usize, strata: impl Fn(usize) -> Stratum) -> DatasetManifest {
        DatasetManifest {
            root_path: PathBuf::new(),
            classes: vec![],
            if_thresholds: BTreeMap::new(),
            samples: (0..n)
                .map(|i| SampleRecord {
                    id: format!("s{i:04}"),
                    image_path: format!("images/s{i}.png").into(),
                    if_paths: BTreeMap::new(),
                    mask_paths: BTreeMap::new(),
                    box_path: None,
                    stratum: strata(i),
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes_follow_floor_remainder_policy() {
        for (n, expect) in [(10, (6, 1, 3)), (100, (60, 10, 30)), (11, (7, 1, 3))] {
            let s = split_dataset(&manifest_with(n, |_| Stratum::Unknown), (6, 1, 3), 42, false).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), expect, "n={n}");
        }
    }

    #[test]
    fn stratified_split_preserves_proportions() {
        let m = manifest_with(40, |i| if i % 4 == 0 { Stratum::Injured } else { Stratum::Normal });
        let s = split_dataset(&m, (6, 1, 3), 7, true).unwrap();
        let injured = |ids: &[String]| {
            ids.iter()
                .filter(|id| m.sample(id).unwrap().stratum == Stratum::Injured)
                .count() as f64
        };
        for ids in [&s.train, &s.val, &s.test] {
            let expected = ids.len() as f64 * 10.0 / 40.0;
            assert!((injured(ids) - expected).abs() <= 1.0);
        }
    }

    #[test]
    fn stratification_needs_three_per_stratum() {
        let m = manifest_with(10, |i| if i < 2 { Stratum::Injured } else { Stratum::Normal });
        assert!(matches!(
            split_dataset(&m, (6, 1, 3), 1, true),
            Err(Error::Stratification(_))
        ));
        assert!(split_dataset(&m, (6, 1, 3), 1, false).is_ok());
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_dataset(&manifest_with(0, |_| Stratum::Unknown), (6, 1, 3), 1, false).is_err());
        assert!(split_dataset(&manifest_with(5, |_| Stratum::Unknown), (6, 0, 3), 1, false).is_err());
    }

    fn patch_split(n: usize) -> SplitAssignment {
        SplitAssignment {
            train: (0..n).map(|i| format!("p{i}")).collect(),
            val: vec!["v".into()],
            test: vec!["t".into()],
            seed: 0,
            ratios: (6, 1, 3),
            unit: SubsampleUnit::Patch,
        }
    }

    #[test]
    fn subsample_counts() {
        let s = patch_split(480);
        assert_eq!(subsample_training(&s, 1.0, 42, SubsampleUnit::Patch).unwrap(), s);
        let four = subsample_training(&s, 0.04, 42, SubsampleUnit::Patch).unwrap();
        assert_eq!(four.train.len(), 19);
        assert_eq!(four.val, s.val);
        assert_eq!(four.test, s.test);
        assert_eq!(
            subsample_training(&s, 0.005, 42, SubsampleUnit::Patch)
                .unwrap()
                .train
                .len(),
            2
        );
        assert_eq!(
            subsample_training(&patch_split(3), 0.01, 1, SubsampleUnit::Patch)
                .unwrap()
                .train
                .len(),
            1
        );
    }

    #[test]
    fn subsample_errors() {
        let s = patch_split(10);
        assert!(subsample_training(&s, 0.0, 1, SubsampleUnit::Patch).is_err());
        assert!(subsample_training(&s, 1.5, 1, SubsampleUnit::Patch).is_err());
        assert!(subsample_training(&s, 0.5, 1, SubsampleUnit::Sample).is_err());
        assert!(subsample_training(&patch_split(0), 0.5, 1, SubsampleUnit::Patch).is_err());
    }

    #[test]
    fn expand_to_patches_uses_tile_ids() {
        let m = manifest_with(10, |_| Stratum::Unknown);
        let s = split_dataset(&m, (6, 1, 3), 42, false).unwrap();
        let p = expand_to_patches(&s, |_| tile_image((1000, 1000), 250, 250)).unwrap();
        assert_eq!(p.train.len(), 6 * 16);
        assert_eq!(p.unit, SubsampleUnit::Patch);
        let (sample, off) = parse_patch_id(&p.train[1]);
        assert_eq!(sample, s.train[0]);
        assert_eq!(off, Some((0, 250)));
        assert_eq!(parse_patch_id("plain"), ("plain".into(), None));
    }

    #[test]
    fn if_mask_examples() {
        let dark = GrayImage::filled(4, 4, 10);
        assert!(!derive_mask_from_if(&dark, 100.0, 0).any());
        let bright = GrayImage::filled(4, 4, 200);
        assert_eq!(derive_mask_from_if(&bright, 100.0, 0).count(), 16);
        // one 3-pixel L-blob and one isolated pixel
        let mut img = GrayImage::filled(4, 4, 0);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (3, 3)] {
            img.set(y, x, 255);
        }
        let m = derive_mask_from_if(&img, 128.0, 2);
        let kept: Vec<_> = (0..16).filter(|&i| m.as_slice()[i]).collect();
        assert_eq!(kept, vec![0, 1, 4]);
    }

    #[test]
    fn tight_box_of_rectangle() {
        let mut l = LabelMap::new(10, 10);
        for y in 2..5 {
            for x in 1..6 {
                l.set(y, x, 1);
            }
        }
        let b = boxes_from_mask(&l, "c", BoxMode::Tight, 0.0, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].x0, b[0].y0, b[0].x1, b[0].y1), (1, 2, 6, 5));
        assert!(boxes_from_mask(&LabelMap::new(5, 5), "c", BoxMode::Tight, 0.0, 1)
            .unwrap()
            .is_empty());
        assert!(boxes_from_mask(&l, "c", BoxMode::Random, 0.0, 1).is_err());
        assert!(boxes_from_mask(&l, "c", BoxMode::Tight, -1.0, 1).is_err());
    }

    #[test]
    fn tiling_examples() {
        assert_eq!(tile_image((1000, 1000), 250, 250).unwrap().len(), 16);
        assert_eq!(tile_image((512, 512), 512, 512).unwrap().len(), 1);
        let t = tile_image((600, 600), 512, 512).unwrap();
        let corners: Vec<_> = t.iter().map(|c| (c.y, c.x)).collect();
        assert_eq!(corners, vec![(0, 0), (0, 88), (88, 0), (88, 88)]);
        assert!(tile_image((100, 200), 128, 64).is_err());
        assert!(tile_image((100, 200), 32, 64).is_err());
    }

    fn random_instances(seed: u64, h: usize, w: usize) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Grid::from_fn(h, w, |_, _| rng.random_bool(0.3));
        label_components(&mask, Connectivity::Eight).0
    }

    #[test]
    fn random_boxes_stay_within_jitter_of_tight() {
        for seed in 0..100 {
            let l = random_instances(seed, 24, 20);
            let tight = boxes_from_mask(&l, "c", BoxMode::Tight, 0.0, seed).unwrap();
            let rand = boxes_from_mask(&l, "c", BoxMode::Random, 0.1, seed).unwrap();
            assert_eq!(tight.len(), rand.len());
            for (t, r) in tight.iter().zip(&rand) {
                let dw = 0.1 * t.width() as f64;
                let dh = 0.1 * t.height() as f64;
                assert!((r.x0 as f64 - t.x0 as f64).abs() <= dw);
                assert!((r.x1 as f64 - t.x1 as f64).abs() <= dw);
                assert!((r.y0 as f64 - t.y0 as f64).abs() <= dh);
                assert!((r.y1 as f64 - t.y1 as f64).abs() <= dh);
                assert!(r.x1 <= 20 && r.y1 <= 24);
            }
            let again = boxes_from_mask(&l, "c", BoxMode::Random, 0.1, seed).unwrap();
            assert_eq!(rand, again);
            assert_eq!(jitter_boxes(&tight, 0.1, seed, (24, 20)).unwrap(), rand);
        }
        let outside = BoxAnnotation::new("c", 0, 0, 30, 5, BoxSource::Human).unwrap();
        assert!(jitter_boxes(&[outside], 0.1, 0, (24, 20)).is_err());
    }

    proptest! {
        #[test]
        fn split_is_partition_and_deterministic(n in 3usize..200, seed in any::<u64>(), r in (1u32..8, 1u32..4, 1u32..5)) {
            let m = manifest_with(n, |i| if i % 3 == 0 { Stratum::Injured } else { Stratum::Normal });
            let s = split_dataset(&m, r, seed, false).unwrap();
            let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            let mut ids = m.ids();
            ids.sort();
            prop_assert_eq!(all, ids);
            prop_assert_eq!(s, split_dataset(&m, r, seed, false).unwrap());
        }

        #[test]
        fn tight_boxes_are_minimal(seed in any::<u64>()) {
            let l = random_instances(seed, 16, 16);
            let boxes = boxes_from_mask(&l, "c", BoxMode::Tight, 0.0, 0).unwrap();
            for (i, b) in boxes.iter().enumerate() {
                let label = i as u32 + 1;
                let (mut top, mut bottom, mut left, mut right) = (false, false, false, false);
                for y in 0..16 {
                    for x in 0..16 {
                        if l.at(y, x) == label {
                            prop_assert!(b.contains(y, x));
                            top |= y == b.y0;
                            bottom |= y + 1 == b.y1;
                            left |= x == b.x0;
                            right |= x + 1 == b.x1;
                        }
                    }
                }
                prop_assert!(top && bottom && left && right);
            }
        }

        #[test]
        fn if_mask_monotone_in_threshold(seed in any::<u64>(), t in 0.0f64..255.0, dt in 0.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Grid::from_fn(12, 12, |_, _| rng.random::<u8>());
            let low = derive_mask_from_if(&img, t, 3);
            let high = derive_mask_from_if(&img, t + dt, 3);
            for (h, l) in high.as_slice().iter().zip(low.as_slice()) {
                prop_assert!(!h || *l);
            }
        }

        #[test]
        fn tiles_cover_every_pixel(h in 1usize..300, w in 1usize..300, tile in 1usize..128, stride in 1usize..160) {
            prop_assume!(tile <= h.min(w) && stride <= tile);
            let tiles = tile_image((h, w), tile, stride).unwrap();
            let mut cover = Mask::new(h, w);
            for t in &tiles {
                prop_assert!(t.y + tile <= h && t.x + tile <= w);
                for y in t.y..t.y + tile {
                    for x in t.x..t.x + tile {
                        cover.set(y, x, true);
                    }
                }
            }
            prop_assert_eq!(cover.count(), h * w);
        }

        #[test]
        fn subsample_deterministic(n in 1usize..500, frac in 0.001f64..=1.0, seed in any::<u64>()) {
            let s = patch_split(n);
            let a = subsample_training(&s, frac, seed, SubsampleUnit::Patch).unwrap();
            let b = subsample_training(&s, frac, seed, SubsampleUnit::Patch).unwrap();
            prop_assert_eq!(a.train.len(), subsample_count(n, frac));
            prop_assert_eq!(a, b);
        }
    }
}
