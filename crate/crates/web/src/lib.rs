//! wasm-bindgen bindings for the browser demo in `www/`.
//!
//! Images cross the boundary as canvas RGBA bytes. Every exported function
//! wraps a plain Rust function so the logic is testable off the browser.

use mocl_core::annotator::builtin_segment;
use mocl_core::data_ingest::{boxes_from_mask, BoxAnnotation, BoxMode, BoxSource};
use mocl_core::mocl::{select_topk, similarity_map, weight_maps, Aggregation};
use mocl_core::synth::{render_patch, SynthConfig};
use mocl_core::texture::{extract_texture_features, gaussian_blur};
use mocl_core::{EmbeddingMap, Grid, Mask, RealMap, Result, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const CLASSES: [&str; 2] = ["podocyte", "mesangial"];

fn js(e: mocl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

pub fn image_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<RgbImage> {
    if rgba.len() != width * height * 4 {
        return Err(mocl_core::Error::InvalidArgument(format!(
            "expected {} RGBA bytes for {width}x{height}, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let px = rgba.chunks_exact(4).map(|p| [p[0], p[1], p[2]]).collect();
    Grid::from_vec(height, width, px)
}

pub fn image_to_rgba(image: &RgbImage) -> Vec<u8> {
    image.as_slice().iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn mask_from_bytes(bytes: &[u8], width: usize, height: usize) -> Result<Mask> {
    Grid::from_vec(height, width, bytes.iter().map(|&b| b != 0).collect())
}

/// Gray RGBA rendering of a real map, min to black and max to white.
pub fn real_to_rgba(map: &RealMap) -> Vec<u8> {
    let (lo, hi) = map
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    map.as_slice()
        .iter()
        .flat_map(|&v| {
            let g = (255.0 * (v - lo) / span).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// A rendered synthetic patch with its tight boxes.
#[wasm_bindgen]
pub struct SynthPatch {
    image: RgbImage,
    boxes: Vec<BoxAnnotation>,
}

#[wasm_bindgen]
impl SynthPatch {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> SynthPatch {
        let classes: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
        let cfg = SynthConfig {
            size,
            ..SynthConfig::default()
        };
        let patch = render_patch(&classes, &cfg, &mut ChaCha8Rng::seed_from_u64(seed as u64));
        let mut boxes = Vec::new();
        for class in &classes {
            boxes.extend(boxes_from_mask(&patch.instances[class], class, BoxMode::Tight, 0.0, 0).expect("tight boxes"));
        }
        SynthPatch {
            image: patch.image,
            boxes,
        }
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn rgba(&self) -> Vec<u8> {
        image_to_rgba(&self.image)
    }

    /// Flat `[class, x0, y0, x1, y1]` per box; class indexes [`CLASSES`].
    pub fn boxes(&self) -> Vec<u32> {
        self.boxes
            .iter()
            .flat_map(|b| {
                let c = CLASSES.iter().position(|&c| c == b.class_name).unwrap_or(0);
                [c, b.x0, b.y0, b.x1, b.y1].map(|v| v as u32)
            })
            .collect()
    }
}

pub fn texture(image: &RgbImage, sigma: f64) -> Result<RealMap> {
    extract_texture_features(image, sigma)
}

pub fn segment(image: &RgbImage, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Mask> {
    let prompt = BoxAnnotation::new(CLASSES[0], x0, y0, x1, y1, BoxSource::Human)?;
    builtin_segment(image, &prompt)
}

/// Combined corrective weight map for `annotation` on `image`.
///
/// Stand-ins for the network outputs: per-pixel embeddings are the centred
/// RGB values plus texture, confidence is the blurred annotation.
pub fn corrective_weights(image: &RgbImage, annotation: &Mask, k: usize, eps_floor: f64) -> Result<RealMap> {
    let (h, w) = image.shape();
    annotation.ensure_same_shape(image, "annotation vs image")?;
    let tex = extract_texture_features(image, 2.0)?;
    let mut data = Vec::with_capacity(h * w * 4);
    for (p, t) in image.as_slice().iter().zip(tex.as_slice()) {
        data.extend([p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0, *t]);
    }
    let mut mean = [0.0; 4];
    for v in data.chunks_exact(4) {
        for c in 0..4 {
            mean[c] += v[c] / (h * w) as f64;
        }
    }
    for v in data.chunks_exact_mut(4) {
        for c in 0..4 {
            v[c] -= mean[c];
        }
    }
    let embeddings = EmbeddingMap::from_vec(h, w, 4, data)?;
    let confidence = gaussian_blur(&annotation.map(|&a| if a { 1.0 } else { 0.0 }), 2.0).map(|v| v.clamp(0.0, 1.0));
    let selection = select_topk(&embeddings, &confidence, annotation, k, CLASSES[0])?;
    let similarity = similarity_map(&embeddings, &selection, (h, w), Aggregation::MeanCosine)?;
    Ok(weight_maps(&confidence, &similarity, annotation, eps_floor)?.combined())
}

/// Signed heat map: positive weights red, negative blue, scaled by the
/// largest magnitude.
pub fn weights_to_rgba(omega: &RealMap) -> Vec<u8> {
    let top = omega.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    omega
        .as_slice()
        .iter()
        .flat_map(|&v| {
            let a = (255.0 * v.abs() / top).round() as u8;
            if v >= 0.0 {
                [a, 0, 0, 255]
            } else {
                [0, 0, a, 255]
            }
        })
        .collect()
}

#[wasm_bindgen(js_name = textureMap)]
pub fn texture_map(rgba: &[u8], width: usize, height: usize, sigma: f64) -> std::result::Result<Vec<u8>, JsError> {
    let image = image_from_rgba(rgba, width, height).map_err(js)?;
    Ok(real_to_rgba(&texture(&image, sigma).map_err(js)?))
}

/// Box-prompted mask, one byte (0 or 1) per pixel.
#[wasm_bindgen(js_name = segmentBox)]
pub fn segment_box(
    rgba: &[u8],
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> std::result::Result<Vec<u8>, JsError> {
    let image = image_from_rgba(rgba, width, height).map_err(js)?;
    let mask = segment(&image, x0, y0, x1, y1).map_err(js)?;
    Ok(mask.as_slice().iter().map(|&m| m as u8).collect())
}

#[wasm_bindgen(js_name = weightMap)]
pub fn weight_map(
    rgba: &[u8],
    width: usize,
    height: usize,
    mask: &[u8],
    k: usize,
    eps_floor: f64,
) -> std::result::Result<Vec<u8>, JsError> {
    let image = image_from_rgba(rgba, width, height).map_err(js)?;
    let annotation = mask_from_bytes(mask, width, height).map_err(js)?;
    Ok(weights_to_rgba(
        &corrective_weights(&image, &annotation, k, eps_floor).map_err(js)?,
    ))
}
