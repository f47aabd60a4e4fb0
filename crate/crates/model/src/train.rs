//! Adapter training and corrective refinement.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use mocl_core::grid::{EmbeddingMap, Mask, RgbImage};
use mocl_core::mocl::{self, Aggregation};
use mocl_core::{metrics, texture, RealMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::{input_tensors, AdapterModel, ForwardOutput, Mode};

/// One model-sized training patch with per-class label masks in the model's
/// class order.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    pub image: RgbImage,
    pub texture: RealMap,
    pub labels: Vec<Mask>,
}

impl TrainingItem {
    /// Computes the texture map from `image` itself.
    pub fn new(id: impl Into<String>, image: RgbImage, labels: Vec<Mask>, sigma: f64) -> Result<Self> {
        let texture = texture::extract_texture_features(&image, sigma)?;
        Self::with_texture(id, image, texture, labels)
    }

    /// Uses a precomputed texture map, e.g. a crop of the whole-image map.
    pub fn with_texture(id: impl Into<String>, image: RgbImage, texture: RealMap, labels: Vec<Mask>) -> Result<Self> {
        let id = id.into();
        image.ensure_same_shape(&texture, &format!("texture of {id}"))?;
        for l in &labels {
            image.ensure_same_shape(l, &format!("label of {id}"))?;
        }
        Ok(Self {
            id,
            image,
            texture,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without a validation Dice improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            patience: 20,
            seed: 42,
        }
    }
}

impl Hyperparams {
    /// Defaults for the refinement stage.
    pub fn refinement() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            patience: 10,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoclParams {
    pub k: usize,
    pub eps_floor: f64,
    pub aggregation: Aggregation,
    /// Zero out negative combined weights (pixels whose embedding points away
    /// from the class prototypes).
    pub clamp_negative: bool,
}

impl Default for MoclParams {
    fn default() -> Self {
        Self {
            k: mocl::DEFAULT_TOP_K,
            eps_floor: mocl::DEFAULT_EPS_FLOOR,
            aggregation: Aggregation::default(),
            clamp_negative: true,
        }
    }
}

/// Training objective.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainLoss {
    /// Unweighted soft Dice + BCE.
    DiceBce,
    /// Confidence- and similarity-weighted Dice + BCE.
    Mocl(MoclParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    /// Mean combined weight on annotated pixels (weighted objective only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_fg_mean: Option<f64>,
    /// Mean combined weight on unannotated pixels (weighted objective only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_bg_mean: Option<f64>,
    /// (image, class) pairs skipped for an empty annotation.
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Validation Dice before the first update.
    pub initial_val_dice: Option<f64>,
    /// Epoch whose weights were kept; 0 means the starting weights.
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub stopped_early: bool,
}

/// Per-batch statistics from [`batch_loss`].
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub skipped: usize,
    pub used: usize,
    fg_sum: f64,
    fg_n: usize,
    bg_sum: f64,
    bg_n: usize,
}

impl BatchStats {
    fn merge(&mut self, o: &BatchStats) {
        self.skipped += o.skipped;
        self.used += o.used;
        self.fg_sum += o.fg_sum;
        self.fg_n += o.fg_n;
        self.bg_sum += o.bg_sum;
        self.bg_n += o.bg_n;
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        let m = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        (m(self.fg_sum, self.fg_n), m(self.bg_sum, self.bg_n))
    }
}

fn labels_tensor(items: &[&TrainingItem], model: &AdapterModel) -> Result<Tensor> {
    let c = model.classes().len();
    let (h, w) = items[0].image.shape();
    let mut v = Vec::with_capacity(items.len() * c * h * w);
    for it in items {
        if it.labels.len() != c {
            return Err(ModelError::Shape(format!(
                "{} has {} label masks, the model has {c} classes",
                it.id,
                it.labels.len()
            )));
        }
        for l in &it.labels {
            v.extend(l.as_slice().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
    }
    Ok(Tensor::from_vec(v, (items.len(), c, h, w), model.device())?)
}

/// Host copy of a `(B, C, H, W)` tensor as `B` lists of `C` maps.
pub(crate) fn to_maps(t: &Tensor) -> Result<Vec<Vec<RealMap>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let start = (i * c + j) * hw;
                    RealMap::from_vec(h, w, flat[start..start + hw].to_vec()).expect("sized slice")
                })
                .collect()
        })
        .collect())
}

pub(crate) fn to_embeddings(t: &Tensor) -> Result<Vec<EmbeddingMap>> {
    let (b, m, h, w) = t.dims4()?;
    let flat = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = m * h * w;
    (0..b)
        .map(|i| Ok(EmbeddingMap::from_channel_first(h, w, m, &flat[i * n..(i + 1) * n])?))
        .collect()
}

/// Weighted soft Dice + BCE per (image, class), averaged over the entries
/// flagged valid. `omega` and `labels` are `(B, C, H, W)`, `valid` is `(B, C)`.
pub fn weighted_loss_tensor(prob: &Tensor, labels: &Tensor, omega: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let clamp = mocl::PROB_CLAMP;
    let p = prob.clamp(clamp, 1.0 - clamp)?;
    let sum = |t: Tensor| t.sum((2, 3));
    let a = sum(((omega * &p)? * labels)?)?;
    let b = sum((omega * &p)?)?;
    let c = sum((omega * labels)?)?;
    let total = sum(omega.clone())?;
    let smooth = mocl::DICE_SMOOTH;
    let dice = ((((a * 2.0)? + smooth)? / ((b + c)? + smooth)?)?.affine(-1.0, 1.0))?;
    let one_minus_y = labels.affine(-1.0, 1.0)?;
    let bce = ((labels * p.log()?)? + (&one_minus_y * p.affine(-1.0, 1.0)?.log()?)?)?.neg()?;
    let bce = (sum((omega * bce)?)? / total.clamp(smooth, f64::MAX)?)?;
    let per = (dice + bce)?;
    let n = valid.sum_all()?;
    Ok(((per * valid)?.sum_all()? / n)?)
}

/// Builds the per-pixel weights for a forward output and returns the batch
/// loss. With [`TrainLoss::Mocl`] the weights are computed from the detached
/// prediction; (image, class) pairs with an empty annotation are skipped.
pub fn batch_loss(
    model: &AdapterModel,
    out: &ForwardOutput,
    items: &[&TrainingItem],
    loss: &TrainLoss,
) -> Result<(Option<Tensor>, BatchStats)> {
    let labels = labels_tensor(items, model)?;
    let (b, c, h, w) = out.prob.dims4()?;
    let mut stats = BatchStats::default();
    let (omega, valid) = match loss {
        TrainLoss::DiceBce => {
            stats.used = b * c;
            (labels.ones_like()?, Tensor::ones((b, c), DType::F32, model.device())?)
        }
        TrainLoss::Mocl(p) => {
            let probs = to_maps(&out.prob)?;
            let embeds = to_embeddings(&out.embeddings)?;
            let mut om = Vec::with_capacity(b * c * h * w);
            let mut valid = Vec::with_capacity(b * c);
            for (i, it) in items.iter().enumerate() {
                for (j, name) in model.classes().iter().enumerate() {
                    let y = &it.labels[j];
                    let maps = if y.any() {
                        Some(mocl::class_weight_maps(
                            &probs[i],
                            j,
                            name,
                            &embeds[i],
                            y,
                            p.k,
                            p.eps_floor,
                            p.aggregation,
                        )?)
                    } else {
                        None
                    };
                    let mut combined = match &maps {
                        Some(m) => m.combined(),
                        None => RealMap::new(h, w),
                    };
                    if p.clamp_negative {
                        combined.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    let usable = maps.is_some() && combined.as_slice().iter().sum::<f64>() > 0.0;
                    if usable {
                        stats.used += 1;
                        for (&v, &yy) in combined.as_slice().iter().zip(y.as_slice()) {
                            if yy {
                                stats.fg_sum += v;
                                stats.fg_n += 1;
                            } else {
                                stats.bg_sum += v;
                                stats.bg_n += 1;
                            }
                        }
                    } else {
                        stats.skipped += 1;
                    }
                    valid.push(if usable { 1.0f32 } else { 0.0 });
                    om.extend(combined.as_slice().iter().map(|&v| v as f32));
                }
            }
            (
                Tensor::from_vec(om, (b, c, h, w), model.device())?,
                Tensor::from_vec(valid, (b, c), model.device())?,
            )
        }
    };
    if stats.used == 0 {
        return Ok((None, stats));
    }
    Ok((Some(weighted_loss_tensor(&out.prob, &labels, &omega, &valid)?), stats))
}

fn forward_items(model: &AdapterModel, items: &[&TrainingItem], mode: Mode) -> Result<ForwardOutput> {
    let images: Vec<&RgbImage> = items.iter().map(|i| &i.image).collect();
    let textures: Vec<&RealMap> = items.iter().map(|i| &i.texture).collect();
    let (x, t) = input_tensors(&images, &textures, model.device())?;
    model.forward(&x, &t, true, mode)
}

/// Mean unweighted loss and mean thresholded Dice over items and classes.
pub fn validate(model: &AdapterModel, items: &[TrainingItem], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut n_dice = 0usize;
    let mut n_batches = 0usize;
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingItem> = chunk.iter().collect();
        let out = forward_items(model, &refs, Mode::Infer)?;
        if let (Some(l), _) = batch_loss(model, &out, &refs, &TrainLoss::DiceBce)? {
            loss_sum += l.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            n_batches += chunk.len();
        }
        for (maps, it) in to_maps(&out.prob)?.iter().zip(chunk) {
            for (p, y) in maps.iter().zip(&it.labels) {
                let pred = p.map(|&v| v >= 0.5);
                dice_sum += metrics::dice(&pred, y)?;
                n_dice += 1;
            }
        }
    }
    Ok((loss_sum / n_batches.max(1) as f64, dice_sum / n_dice.max(1) as f64))
}

/// Shared optimization loop. Keeps the weights with the best validation
/// Dice; with `include_start` the starting weights compete too.
fn fit(
    model: &mut AdapterModel,
    train: &[TrainingItem],
    val: &[TrainingItem],
    hp: &Hyperparams,
    loss: &TrainLoss,
    include_start: bool,
) -> Result<TrainingHistory> {
    if train.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    let mut history = TrainingHistory::default();
    if hp.epochs == 0 {
        return Ok(history);
    }
    // without a validation split, select on the training data
    let val = if val.is_empty() { train } else { val };
    let bs = hp.batch_size.max(1);
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    if include_start {
        let (_, d) = validate(model, val, bs)?;
        history.initial_val_dice = Some(d);
        history.best_val_dice = Some(d);
        best = Some((d, model.snapshot_trainable()?));
    }
    let params = ParamsAdamW {
        lr: hp.learning_rate,
        weight_decay: hp.weight_decay,
        ..ParamsAdamW::default()
    };
    let mut opt = AdamW::new(model.trainable_vars(), params)?;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut stats = BatchStats::default();
        for chunk in order.chunks(bs) {
            let refs: Vec<&TrainingItem> = chunk.iter().map(|&i| &train[i]).collect();
            let out = forward_items(model, &refs, Mode::Train)?;
            let (l, s) = batch_loss(model, &out, &refs, loss)?;
            stats.merge(&s);
            let Some(l) = l else { continue };
            let v = l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(ModelError::Divergence { epoch });
            }
            opt.backward_step(&l)?;
            loss_sum += v;
            steps += 1;
        }
        if steps == 0 {
            return Err(ModelError::RefinementImpossible(
                "every image/class pair was skipped (no annotated pixels)".into(),
            ));
        }
        let (val_loss, val_dice) = validate(model, val, bs)?;
        if !val_loss.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        let (fg, bg) = stats.means();
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_dice,
            omega_fg_mean: if matches!(loss, TrainLoss::Mocl(_)) { fg } else { None },
            omega_bg_mean: if matches!(loss, TrainLoss::Mocl(_)) { bg } else { None },
            skipped: stats.skipped,
        };
        tracing::info!(epoch, train_loss = rec.train_loss, val_loss, val_dice, "epoch finished");
        history.epochs.push(rec);
        if best.as_ref().is_none_or(|(b, _)| val_dice > *b) {
            best = Some((val_dice, model.snapshot_trainable()?));
            history.best_epoch = epoch;
            history.best_val_dice = Some(val_dice);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.patience {
                history.stopped_early = epoch < hp.epochs;
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        model.restore_trainable(&snap)?;
    }
    Ok(history)
}

/// Trains adapters, texture projections and decoder. The backbone is never
/// touched. The weights with the best validation Dice are restored at the end.
pub fn train_adapter(
    model: &mut AdapterModel,
    train: &[TrainingItem],
    val: &[TrainingItem],
    hp: &Hyperparams,
    loss: &TrainLoss,
) -> Result<TrainingHistory> {
    fit(model, train, val, hp, loss, false)
}

/// Corrective refinement of an adapter-trained model with the weighted loss.
/// The pre-refinement weights are kept when no epoch improves validation Dice.
pub fn refine(
    model: &mut AdapterModel,
    train: &[TrainingItem],
    val: &[TrainingItem],
    hp: &Hyperparams,
    params: &MoclParams,
) -> Result<TrainingHistory> {
    if !train.iter().any(|it| it.labels.iter().any(|l| l.any())) {
        return Err(ModelError::RefinementImpossible(
            "no training image has an annotated pixel".into(),
        ));
    }
    fit(model, train, val, hp, &TrainLoss::Mocl(params.clone()), true)
}
