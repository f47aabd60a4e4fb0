//! Prompt-free inference, with tiling for images larger than the model input.

use mocl_core::data_ingest::tile_image;
use mocl_core::grid::{EmbeddingMap, RgbImage};
use mocl_core::{texture, RealMap};

use crate::error::{ModelError, Result};
use crate::network::{input_tensors, AdapterModel, Mode};
use crate::train::{to_embeddings, to_maps};

const TILE_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// Per-class foreground probability, in the model's class order.
    pub prob: Vec<RealMap>,
    pub embeddings: EmbeddingMap,
}

/// Tile stride used for images larger than the model input.
pub fn default_stride(input: usize) -> usize {
    (input * 3 / 4).max(1)
}

fn run(model: &AdapterModel, image: &RgbImage, want_embeddings: bool) -> Result<(Vec<RealMap>, Option<EmbeddingMap>)> {
    let s = model.input_size();
    let (h, w) = image.shape();
    if h < s || w < s {
        return Err(ModelError::Shape(format!(
            "image {h}×{w} is smaller than the model input {s}×{s}"
        )));
    }
    let tex = texture::extract_texture_features(image, model.config().adapter.texture_sigma)?;
    let tiles = tile_image((h, w), s, default_stride(s))?;
    let c = model.classes().len();
    let m = model.config().decoder.embed_channels;
    let mut prob_sum = vec![RealMap::new(h, w); c];
    let mut emb_sum = if want_embeddings {
        vec![0.0; h * w * m]
    } else {
        Vec::new()
    };
    let mut count = vec![0u32; h * w];
    for chunk in tiles.chunks(TILE_BATCH) {
        let crops: Vec<(RgbImage, RealMap)> = chunk
            .iter()
            .map(|t| Ok((image.crop(t.y, t.x, s, s)?, tex.crop(t.y, t.x, s, s)?)))
            .collect::<Result<_>>()?;
        let imgs: Vec<&RgbImage> = crops.iter().map(|c| &c.0).collect();
        let texs: Vec<&RealMap> = crops.iter().map(|c| &c.1).collect();
        let (x, t) = input_tensors(&imgs, &texs, model.device())?;
        let out = model.forward(&x, &t, true, Mode::Infer)?;
        let probs = to_maps(&out.prob)?;
        let embeds = if want_embeddings {
            to_embeddings(&out.embeddings)?
        } else {
            Vec::new()
        };
        for (i, tile) in chunk.iter().enumerate() {
            for yy in 0..s {
                for xx in 0..s {
                    let (y, x) = (tile.y + yy, tile.x + xx);
                    let idx = y * w + x;
                    count[idx] += 1;
                    for (k, p) in probs[i].iter().enumerate() {
                        prob_sum[k].as_mut_slice()[idx] += p.at(yy, xx);
                    }
                    if want_embeddings {
                        let v = embeds[i].vector(yy, xx);
                        for (a, b) in emb_sum[idx * m..(idx + 1) * m].iter_mut().zip(v) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    for p in &mut prob_sum {
        for (v, &n) in p.as_mut_slice().iter_mut().zip(&count) {
            *v /= n as f64;
        }
    }
    let embeddings = if want_embeddings {
        for (i, &n) in count.iter().enumerate() {
            emb_sum[i * m..(i + 1) * m].iter_mut().for_each(|v| *v /= n as f64);
        }
        Some(EmbeddingMap::from_vec(h, w, m, emb_sum)?)
    } else {
        None
    };
    Ok((prob_sum, embeddings))
}

/// Probabilities and embeddings for `image`. Overlapping tiles are averaged.
pub fn predict(model: &AdapterModel, image: &RgbImage) -> Result<PredictionOutput> {
    let (prob, emb) = run(model, image, true)?;
    Ok(PredictionOutput {
        prob,
        embeddings: emb.expect("requested"),
    })
}

/// Probabilities only; cheaper on large images.
pub fn predict_prob(model: &AdapterModel, image: &RgbImage) -> Result<Vec<RealMap>> {
    Ok(run(model, image, false)?.0)
}
