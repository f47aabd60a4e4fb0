//! Seeded synthetic stain/IF patches: textured elliptical nuclei with a
//! chromatic signature per class, matching IF channels, masks and tight boxes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{dilate3, erode3, label_components, Connectivity};
use crate::data_ingest::{boxes_from_mask, BoxAnnotation, BoxMode, DatasetManifest, SampleRecord, Stratum};
use crate::error::Result;
use crate::grid::{GrayImage, Grid, LabelMap, Mask, RgbImage};
use crate::io;

/// IF intensity threshold declared for every synthetic marker.
pub const SYNTH_IF_THRESHOLD: f64 = 128.0;

/// Nucleus colours, cycled when there are more classes than entries.
const PALETTE: [[f64; 3]; 4] = [
    [62.0, 48.0, 150.0],
    [150.0, 40.0, 70.0],
    [40.0, 110.0, 80.0],
    [120.0, 95.0, 30.0],
];
const BACKGROUND: [f64; 3] = [228.0, 196.0, 214.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub min_nuclei: usize,
    pub max_nuclei: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Fraction of patches tagged `injured`.
    pub injured_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            min_nuclei: 6,
            max_nuclei: 12,
            min_radius: 4.0,
            max_radius: 8.0,
            injured_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPatch {
    pub image: RgbImage,
    pub if_channels: BTreeMap<String, GrayImage>,
    pub class_masks: BTreeMap<String, Mask>,
    /// Per-class instance maps, labels 1..=n.
    pub instances: BTreeMap<String, LabelMap>,
}

struct Nucleus {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    class: usize,
}

impl Nucleus {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn smooth_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (fy, fx, py, px) = (
        rng.random_range(0.02..0.08),
        rng.random_range(0.02..0.08),
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
    );
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (y * fy + py).sin() * (x * fx + px).cos()
        })
        .collect()
}

/// Renders one patch.
pub fn render_patch(classes: &[String], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SyntheticPatch {
    let size = cfg.size;
    let n_target = rng.random_range(cfg.min_nuclei..=cfg.max_nuclei);
    let mut nuclei: Vec<Nucleus> = Vec::new();
    let mut occupied = Mask::new(size, size);
    let margin = cfg.max_radius + 2.0;
    let mut attempts = 0;
    while nuclei.len() < n_target && attempts < 400 {
        attempts += 1;
        let a = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let b = rng.random_range(cfg.min_radius..=a);
        let n = Nucleus {
            cy: rng.random_range(margin..size as f64 - margin),
            cx: rng.random_range(margin..size as f64 - margin),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
            class: rng.random_range(0..classes.len().max(1)),
        };
        // keep a 2-pixel gap so every nucleus is its own component
        let footprint = Grid::from_fn(size, size, |y, x| n.contains(y as f64, x as f64));
        let halo = dilate3(&dilate3(&footprint));
        if halo.as_slice().iter().zip(occupied.as_slice()).any(|(&h, &o)| h && o) {
            continue;
        }
        for (o, f) in occupied.as_mut_slice().iter_mut().zip(footprint.as_slice()) {
            *o |= *f;
        }
        nuclei.push(n);
    }

    let field = smooth_field(size, rng);
    let owner: Grid<Option<usize>> = Grid::from_fn(size, size, |y, x| {
        nuclei.iter().position(|n| n.contains(y as f64, x as f64))
    });
    let image = Grid::from_fn(size, size, |y, x| {
        let i = y * size + x;
        let base = match owner.at(y, x) {
            Some(k) => PALETTE[nuclei[k].class % PALETTE.len()],
            None => BACKGROUND,
        };
        let swing = if owner.at(y, x).is_some() { 18.0 } else { 12.0 };
        let shade = field[i] * 10.0;
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let noise = rng.random_range(-swing..swing);
            *v = (base[c] + shade + noise).round().clamp(0.0, 255.0) as u8;
        }
        px
    });

    let mut if_channels = BTreeMap::new();
    let mut class_masks = BTreeMap::new();
    let mut instances = BTreeMap::new();
    for (ci, name) in classes.iter().enumerate() {
        let mask = owner.map(|o| o.is_some_and(|k| nuclei[k].class == ci));
        let channel = Grid::from_fn(size, size, |y, x| {
            if mask.at(y, x) {
                rng.random_range(175.0..255.0_f64).round() as u8
            } else if rng.random_bool(0.003) {
                255
            } else {
                rng.random_range(0.0..60.0_f64).round() as u8
            }
        });
        instances.insert(name.clone(), label_components(&mask, Connectivity::Eight).0);
        if_channels.insert(name.clone(), channel);
        class_masks.insert(name.clone(), mask);
    }
    SyntheticPatch {
        image,
        if_channels,
        class_masks,
        instances,
    }
}

/// Writes `n_patches` patches under `out_dir` in the standard directory
/// layout and returns the manifest (also saved as `manifest.json`).
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_patches: usize,
    classes: &[String],
    seed: u64,
    cfg: &SynthConfig,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_patches);
    for i in 0..n_patches {
        let id = format!("synth_{i:04}");
        let patch = render_patch(classes, cfg, &mut rng);
        let image_path = Path::new("images").join(format!("{id}.png"));
        io::write_rgb(&out_dir.join(&image_path), &patch.image)?;
        let mut if_paths = BTreeMap::new();
        let mut mask_paths = BTreeMap::new();
        let mut boxes: Vec<BoxAnnotation> = Vec::new();
        for name in classes {
            let ip = Path::new("if").join(name).join(format!("{id}.png"));
            io::write_gray(&out_dir.join(&ip), &patch.if_channels[name])?;
            if_paths.insert(name.clone(), ip);
            let mp = Path::new("masks").join(name).join(format!("{id}.png"));
            io::write_mask(&out_dir.join(&mp), &patch.class_masks[name])?;
            mask_paths.insert(name.clone(), mp);
            boxes.extend(boxes_from_mask(&patch.instances[name], name, BoxMode::Tight, 0.0, 0)?);
        }
        let box_path = Path::new("boxes").join(format!("{id}.jsonl"));
        io::write_boxes(&out_dir.join(&box_path), &boxes)?;
        let stratum = if rng.random_bool(cfg.injured_fraction) {
            Stratum::Injured
        } else {
            Stratum::Normal
        };
        samples.push(SampleRecord {
            id,
            image_path,
            if_paths,
            mask_paths,
            box_path: Some(box_path),
            stratum,
        });
    }
    let manifest = DatasetManifest {
        root_path: out_dir.to_path_buf(),
        classes: classes.to_vec(),
        if_thresholds: classes.iter().map(|c| (c.clone(), SYNTH_IF_THRESHOLD)).collect(),
        samples,
    };
    let on_disk = DatasetManifest {
        root_path: ".".into(),
        ..manifest.clone()
    };
    io::write_json(&out_dir.join("manifest.json"), &on_disk)?;
    Ok(manifest)
}

/// Annotator-noise model applied to per-class instance maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    /// Maximum boundary shift in pixels (each instance draws from `-r..=r`).
    pub boundary_px: u32,
    /// Probability that an instance is omitted.
    pub dropout: f64,
}

impl Default for LabelNoise {
    fn default() -> Self {
        Self {
            boundary_px: 2,
            dropout: 0.1,
        }
    }
}

/// Dilates or erodes every instance by a random number of pixels and drops
/// a random subset; returns the perturbed class mask.
pub fn apply_label_noise(instances: &LabelMap, noise: &LabelNoise, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = instances.shape();
    let n = instances.as_slice().iter().copied().max().unwrap_or(0);
    let mut out = Mask::new(h, w);
    let r = noise.boundary_px as i32;
    for label in 1..=n {
        let keep = !rng.random_bool(noise.dropout.clamp(0.0, 1.0));
        let shift = rng.random_range(-r..=r);
        if !keep {
            continue;
        }
        let mut m = instances.map(|&l| l == label);
        for _ in 0..shift.unsigned_abs() {
            m = if shift > 0 { dilate3(&m) } else { erode3(&m) };
        }
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o |= *v;
        }
    }
    out
}
