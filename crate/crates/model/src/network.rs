//! The adapter model: a frozen ViT encoder, bottleneck adapters and texture
//! projections in the injected blocks, and a small upsampling decoder.
//!
//! Backbone tensors are plain tensors and never see an optimizer. Everything
//! trainable is a [`Var`].

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use mocl_core::grid::RgbImage;
use mocl_core::RealMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::im2col::{im2col, upsample2};

const LN_EPS: f32 = 1e-6;
const BACKBONE_INIT_STD: f64 = 0.02;

/// Whether a forward pass should record the graph for backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Forward pass result for a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, C, H, W)` foreground probabilities.
    pub prob: Tensor,
    /// `(B, M, H, W)` decoder embeddings.
    pub embeddings: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug)]
pub struct AdapterModel {
    config: ModelConfig,
    device: Device,
    backbone: BTreeMap<String, Tensor>,
    trainable: BTreeMap<String, Var>,
}

impl Clone for AdapterModel {
    /// Deep copy: the clone's trainable variables do not share storage.
    fn clone(&self) -> Self {
        let trainable = self
            .trainable
            .iter()
            .map(|(n, v)| {
                let t = v.as_tensor().copy().expect("cpu tensor copy");
                (n.clone(), Var::from_tensor(&t).expect("cpu var"))
            })
            .collect();
        Self {
            config: self.config.clone(),
            device: self.device.clone(),
            backbone: self.backbone.clone(),
            trainable,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect()
}

fn backbone_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = &cfg.encoder;
    let d = e.embed_dim;
    let hidden = d * e.mlp_ratio;
    let mut v = vec![
        (
            "backbone.patch_embed.weight".to_string(),
            vec![d, 3 * e.patch_size * e.patch_size],
        ),
        ("backbone.patch_embed.bias".to_string(), vec![d]),
        ("backbone.pos_embed".to_string(), vec![e.num_tokens(), d]),
    ];
    for i in 0..e.depth {
        let p = format!("backbone.blocks.{i}");
        v.extend([
            (format!("{p}.norm1.weight"), vec![d]),
            (format!("{p}.norm1.bias"), vec![d]),
            (format!("{p}.attn.qkv.weight"), vec![3 * d, d]),
            (format!("{p}.attn.qkv.bias"), vec![3 * d]),
            (format!("{p}.attn.proj.weight"), vec![d, d]),
            (format!("{p}.attn.proj.bias"), vec![d]),
            (format!("{p}.norm2.weight"), vec![d]),
            (format!("{p}.norm2.bias"), vec![d]),
            (format!("{p}.mlp.fc1.weight"), vec![hidden, d]),
            (format!("{p}.mlp.fc1.bias"), vec![hidden]),
            (format!("{p}.mlp.fc2.weight"), vec![d, hidden]),
            (format!("{p}.mlp.fc2.bias"), vec![d]),
        ]);
    }
    v.push(("backbone.norm.weight".into(), vec![d]));
    v.push(("backbone.norm.bias".into(), vec![d]));
    v
}

/// Trainable tensor names, shapes and whether they start at zero.
fn trainable_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let e = &cfg.encoder;
    let d = e.embed_dim;
    let r = cfg.adapter.bottleneck_dim;
    let w = cfg.decoder.width;
    let mut v = Vec::new();
    for b in cfg.adapter.resolved_blocks(e.depth) {
        for site in ["attn", "mlp"] {
            let p = format!("adapter.{b}.{site}");
            v.push((format!("{p}.down.weight"), vec![r, d], false));
            v.push((format!("{p}.down.bias"), vec![r], true));
            v.push((format!("{p}.up.weight"), vec![d, r], true));
            v.push((format!("{p}.up.bias"), vec![d], true));
        }
        v.push((
            format!("adapter.{b}.texture.weight"),
            vec![d, e.patch_size * e.patch_size],
            true,
        ));
        v.push((format!("adapter.{b}.texture.bias"), vec![d], true));
    }
    let conv = |v: &mut Vec<(String, Vec<usize>, bool)>, name: &str, out: usize, inp: usize, k: usize| {
        v.push((format!("decoder.{name}.weight"), vec![out, inp, k, k], false));
        v.push((format!("decoder.{name}.bias"), vec![out], true));
    };
    conv(&mut v, "neck", 2 * w, d, 1);
    let conv_stages = e.upsample_stages() - 1;
    for s in 0..conv_stages {
        let out = if s + 1 == conv_stages { w } else { 2 * w };
        conv(&mut v, &format!("up.{s}"), out, 2 * w, 3);
    }
    let context = if conv_stages == 0 { 2 * w } else { w };
    conv(&mut v, "stem.0", w, 4, 1);
    conv(&mut v, "stem.1", w, w, 1);
    conv(&mut v, "fuse", w, context + w, 1);
    conv(&mut v, "embed_head", cfg.decoder.embed_channels, w, 1);
    conv(&mut v, "prob_head", cfg.num_classes(), cfg.decoder.embed_channels, 1);
    v
}

/// Model input scaling: pixel values to roughly unit range around zero.
pub fn normalize_pixel(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.25
}

/// Stacks images and texture maps into `(B,3,H,W)` and `(B,1,H,W)` tensors.
pub fn input_tensors(images: &[&RgbImage], textures: &[&RealMap], device: &Device) -> Result<(Tensor, Tensor)> {
    let b = images.len();
    if b == 0 || textures.len() != b {
        return Err(ModelError::Shape("empty batch or image/texture count mismatch".into()));
    }
    let (h, w) = images[0].shape();
    let mut img = Vec::with_capacity(b * 3 * h * w);
    let mut tex = Vec::with_capacity(b * h * w);
    for (im, t) in images.iter().zip(textures) {
        if im.shape() != (h, w) || t.shape() != (h, w) {
            return Err(ModelError::Shape(format!(
                "batch entries must share one shape, expected {h}×{w}"
            )));
        }
        for c in 0..3 {
            img.extend(im.as_slice().iter().map(|p| normalize_pixel(p[c])));
        }
        tex.extend(t.as_slice().iter().map(|&v| v as f32));
    }
    Ok((
        Tensor::from_vec(img, (b, 3, h, w), device)?,
        Tensor::from_vec(tex, (b, 1, h, w), device)?,
    ))
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    x.broadcast_matmul(&w.t()?)?.broadcast_add(b)
}

/// Convolution with "same" zero padding as one im2col matmul, the bias
/// riding along as an extra weight column.
pub(crate) fn conv(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let (out, inp, k, _) = w.dims4()?;
    let (bsz, _, h, wd) = x.dims4()?;
    let wm = Tensor::cat(
        &[
            &w.permute((0, 2, 3, 1))?.reshape((out, k * k * inp))?,
            &b.reshape((out, 1))?,
        ],
        1,
    )?;
    wm.broadcast_matmul(&im2col(x, k)?)?.reshape((bsz, out, h, wd))
}

/// `(B, C, H, W)` → `(B, N, C·p·p)` non-overlapping patches in row-major order.
fn patchify(x: &Tensor, p: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (gh, gw) = (h / p, w / p);
    x.reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * p * p))
}

impl AdapterModel {
    /// Builds a model with a seeded random backbone, zero-initialized adapter
    /// up-projections and texture projections.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut backbone = BTreeMap::new();
        for (name, shape) in backbone_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name.contains("norm") && name.ends_with("weight") {
                vec![1.0f32; n]
            } else if name.ends_with("bias") {
                vec![0.0f32; n]
            } else {
                uniform(&mut rng, n, BACKBONE_INIT_STD * 3f64.sqrt())
            };
            backbone.insert(name, Tensor::from_vec(data, shape, &device)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut trainable = BTreeMap::new();
        for (name, shape, zero) in trainable_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if zero {
                vec![0.0f32; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                uniform(&mut rng, n, (6.0 / fan_in as f64).sqrt())
            };
            let t = Tensor::from_vec(data, shape, &device)?;
            trainable.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            config,
            device,
            backbone,
            trainable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn classes(&self) -> &[String] {
        &self.config.classes
    }

    pub fn input_size(&self) -> usize {
        self.config.encoder.input_size
    }

    pub fn backbone_tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.backbone
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.values().cloned().collect()
    }

    pub fn trainable_named(&self) -> &BTreeMap<String, Var> {
        &self.trainable
    }

    /// Adapter units: one after attention and one after the MLP per injected block.
    pub fn num_adapter_units(&self) -> usize {
        self.trainable
            .keys()
            .filter(|k| k.starts_with("adapter.") && k.ends_with(".down.weight"))
            .count()
    }

    pub fn parameter_table(&self) -> Vec<ParamInfo> {
        let frozen = self.backbone.iter().map(|(n, t)| ParamInfo {
            name: n.clone(),
            shape: t.dims().to_vec(),
            frozen: true,
        });
        let trainable = self.trainable.iter().map(|(n, v)| ParamInfo {
            name: n.clone(),
            shape: v.dims().to_vec(),
            frozen: false,
        });
        frozen.chain(trainable).collect()
    }

    pub(crate) fn replace_backbone(&mut self, tensors: BTreeMap<String, Tensor>) {
        self.backbone = tensors;
    }

    /// Copies of all trainable values, for later [`Self::restore_trainable`].
    pub fn snapshot_trainable(&self) -> Result<BTreeMap<String, Tensor>> {
        self.trainable
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore_trainable(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (n, v) in &self.trainable {
            let t = snapshot
                .get(n)
                .ok_or_else(|| ModelError::Shape(format!("snapshot lacks tensor `{n}`")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over every backbone tensor (name, shape, little-endian values),
    /// in name order.
    pub fn backbone_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.backbone {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    fn b(&self, name: &str) -> &Tensor {
        &self.backbone[name]
    }

    fn t(&self, name: &str, mode: Mode) -> Tensor {
        let v = self.trainable[name].as_tensor();
        match mode {
            Mode::Train => v.clone(),
            Mode::Infer => v.detach(),
        }
    }

    fn adapter(&self, x: &Tensor, prefix: &str, mode: Mode) -> candle_core::Result<Tensor> {
        let h = linear(
            x,
            &self.t(&format!("{prefix}.down.weight"), mode),
            &self.t(&format!("{prefix}.down.bias"), mode),
        )?
        .gelu_erf()?;
        linear(
            &h,
            &self.t(&format!("{prefix}.up.weight"), mode),
            &self.t(&format!("{prefix}.up.bias"), mode),
        )
    }

    fn attention(&self, x: &Tensor, prefix: &str) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let heads = self.config.encoder.num_heads;
        let dh = d / heads;
        let qkv = linear(
            x,
            self.b(&format!("{prefix}.qkv.weight")),
            self.b(&format!("{prefix}.qkv.bias")),
        )?
        .reshape((b, n, 3, heads, dh))?
        .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        linear(
            &out,
            self.b(&format!("{prefix}.proj.weight")),
            self.b(&format!("{prefix}.proj.bias")),
        )
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(
            x,
            self.b(&format!("{prefix}.weight")),
            self.b(&format!("{prefix}.bias")),
            LN_EPS,
        )
    }

    /// Encoder tokens as a `(B, D, g, g)` feature map.
    fn encode(&self, images: &Tensor, texture: &Tensor, adapters: bool, mode: Mode) -> candle_core::Result<Tensor> {
        let e = &self.config.encoder;
        let p = e.patch_size;
        let (b, _, _, _) = images.dims4()?;
        let mut x = linear(
            &patchify(images, p)?,
            self.b("backbone.patch_embed.weight"),
            self.b("backbone.patch_embed.bias"),
        )?
        .broadcast_add(self.b("backbone.pos_embed"))?;
        let tex_tokens = patchify(texture, p)?;
        let inject = self.config.adapter.resolved_blocks(e.depth);
        for i in 0..e.depth {
            let pre = format!("backbone.blocks.{i}");
            let adapted = adapters && inject.contains(&i);
            if adapted {
                let proj = linear(
                    &tex_tokens,
                    &self.t(&format!("adapter.{i}.texture.weight"), mode),
                    &self.t(&format!("adapter.{i}.texture.bias"), mode),
                )?;
                x = (x + proj)?;
            }
            let h = self.layer_norm(&x, &format!("{pre}.norm1"))?;
            x = (&x + self.attention(&h, &format!("{pre}.attn"))?)?;
            if adapted {
                x = (&x + self.adapter(&x, &format!("adapter.{i}.attn"), mode)?)?;
            }
            let h = self.layer_norm(&x, &format!("{pre}.norm2"))?;
            let h = linear(
                &h,
                self.b(&format!("{pre}.mlp.fc1.weight")),
                self.b(&format!("{pre}.mlp.fc1.bias")),
            )?
            .gelu_erf()?;
            let h = linear(
                &h,
                self.b(&format!("{pre}.mlp.fc2.weight")),
                self.b(&format!("{pre}.mlp.fc2.bias")),
            )?;
            x = (x + h)?;
            if adapted {
                x = (&x + self.adapter(&x, &format!("adapter.{i}.mlp"), mode)?)?;
            }
        }
        let x = self.layer_norm(&x, "backbone.norm")?;
        let g = e.grid();
        x.transpose(1, 2)?.reshape((b, e.embed_dim, g, g))
    }

    fn dconv(&self, x: &Tensor, name: &str, mode: Mode) -> candle_core::Result<Tensor> {
        conv(
            x,
            &self.t(&format!("decoder.{name}.weight"), mode),
            &self.t(&format!("decoder.{name}.bias"), mode),
        )
    }

    /// Forward pass on normalized `(B,3,H,W)` images and `(B,1,H,W)` texture
    /// maps with `H = W = input_size`. With `adapters = false` the adapters
    /// and texture projections are bypassed.
    pub fn forward(&self, images: &Tensor, texture: &Tensor, adapters: bool, mode: Mode) -> Result<ForwardOutput> {
        let s = self.input_size();
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != s || w != s {
            return Err(ModelError::Shape(format!(
                "model input must be 3×{s}×{s}, got {c}×{h}×{w}"
            )));
        }
        let tokens = self.encode(images, texture, adapters, mode)?;
        let mut x = self.dconv(&tokens, "neck", mode)?.relu()?;
        // 3×3 stages up to half resolution, then a plain upsample; the
        // full-resolution work is per-pixel and fused with the stem
        for st in 0..self.config.encoder.upsample_stages() - 1 {
            x = self.dconv(&upsample2(&x)?, &format!("up.{st}"), mode)?.relu()?;
        }
        let x = upsample2(&x)?;
        let stem_in = Tensor::cat(&[images, texture], 1)?;
        let stem = self.dconv(&stem_in, "stem.0", mode)?.relu()?;
        let stem = self.dconv(&stem, "stem.1", mode)?.relu()?;
        let feats = self.dconv(&Tensor::cat(&[&x, &stem], 1)?, "fuse", mode)?.relu()?;
        let embeddings = self.dconv(&feats, "embed_head", mode)?;
        let prob = candle_nn::ops::sigmoid(&self.dconv(&embeddings, "prob_head", mode)?)?;
        Ok(ForwardOutput { prob, embeddings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::new(vec!["a".into(), "b".into()]);
        c.encoder.input_size = 32;
        c
    }

    #[test]
    fn adapter_units_two_per_block() {
        let m = AdapterModel::build(ModelConfig::new(vec!["a".into()])).unwrap();
        assert_eq!(m.num_adapter_units(), 4);
        let mut c = small();
        c.adapter.inject_blocks = vec![1];
        assert_eq!(AdapterModel::build(c).unwrap().num_adapter_units(), 2);
    }

    #[test]
    fn frozen_and_trainable_disjoint() {
        let m = AdapterModel::build(small()).unwrap();
        let table = m.parameter_table();
        let frozen: Vec<_> = table.iter().filter(|p| p.frozen).map(|p| &p.name).collect();
        let trainable: Vec<_> = table.iter().filter(|p| !p.frozen).map(|p| &p.name).collect();
        assert!(!frozen.is_empty() && !trainable.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("backbone.")));
        assert!(trainable.iter().all(|n| !n.starts_with("backbone.")));
    }

    #[test]
    fn forward_shapes_and_range() {
        let m = AdapterModel::build(small()).unwrap();
        let img = RgbImage::from_fn(32, 32, |y, x| [(y * 8) as u8, (x * 8) as u8, 100]);
        let tex = RealMap::from_fn(32, 32, |y, x| ((y + x) % 3) as f64 - 1.0);
        let (i, t) = input_tensors(&[&img, &img], &[&tex, &tex], m.device()).unwrap();
        let out = m.forward(&i, &t, true, Mode::Infer).unwrap();
        assert_eq!(out.prob.dims(), &[2, 2, 32, 32]);
        assert_eq!(out.embeddings.dims(), &[2, 32, 32, 32]);
        let p = out.prob.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = Tensor::zeros((1, 3, 16, 16), DType::F32, m.device()).unwrap();
        assert!(m
            .forward(&wrong, &wrong.narrow(1, 0, 1).unwrap(), true, Mode::Infer)
            .is_err());
    }

    #[test]
    fn im2col_conv_matches_candle_conv2d() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 9, 7), &dev).unwrap();
        for k in [1, 3] {
            let w = Tensor::randn(0f32, 1.0, (5, 3, k, k), &dev).unwrap();
            let b = Tensor::randn(0f32, 1.0, 5, &dev).unwrap();
            let ours = conv(&x, &w, &b).unwrap();
            let reference = x
                .conv2d(&w, k / 2, 1, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let diff = (ours - reference)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap();
            assert!(diff.to_scalar::<f32>().unwrap() < 1e-4);
        }
        let up = upsample2(&x).unwrap();
        let reference = x.upsample_nearest2d(18, 14).unwrap();
        assert_eq!(
            up.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            reference.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn build_is_seeded() {
        let a = AdapterModel::build(small()).unwrap();
        let b = AdapterModel::build(small()).unwrap();
        assert_eq!(a.backbone_hash().unwrap(), b.backbone_hash().unwrap());
        let mut c = small();
        c.backbone_seed = 7;
        let c = AdapterModel::build(c).unwrap();
        assert_ne!(a.backbone_hash().unwrap(), c.backbone_hash().unwrap());
        let mut d = small();
        d.seed = 7;
        let d = AdapterModel::build(d).unwrap();
        assert_eq!(a.backbone_hash().unwrap(), d.backbone_hash().unwrap());
        let snap = |m: &AdapterModel| {
            m.snapshot_trainable().unwrap()["decoder.neck.weight"]
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_ne!(snap(&a), snap(&d));
    }
}
