//! Experiment configuration, its TOML form and its semantic hash.

use std::fs;
use std::path::{Path, PathBuf};

use mocl_core::data_ingest::{SubsampleUnit, DEFAULT_IF_MIN_SIZE, DEFAULT_JITTER_FRAC, DEFAULT_SEED};
use mocl_core::mocl::Aggregation;
use mocl_core::synth::LabelNoise;
use mocl_model::{
    AdapterConfig, BackendConfig, DecoderConfig, EncoderConfig, EvalParams, Hyperparams, MoclParams, ModelConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

/// Which labels the model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Ground-truth masks.
    Complete,
    /// Masks converted from tight boxes.
    #[default]
    WeakTight,
    /// Masks converted from randomly displaced boxes.
    WeakRandom,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Complete => "complete",
            Condition::WeakTight => "weak_tight",
            Condition::WeakRandom => "weak_random",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "complete" => Ok(Condition::Complete),
            "weak_tight" => Ok(Condition::WeakTight),
            "weak_random" => Ok(Condition::WeakRandom),
            other => Err(format!(
                "unknown condition `{other}` (complete, weak_tight, weak_random)"
            )),
        }
    }
}

/// Annotator tier, i.e. which label directory is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    #[default]
    Expert,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Builtin,
    Checkpoint,
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "expert" => Ok(Tier::Expert),
            "student" => Ok(Tier::Student),
            other => Err(format!("unknown tier `{other}` (expert, student)")),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "builtin" => Ok(BackendKind::Builtin),
            "checkpoint" => Ok(BackendKind::Checkpoint),
            other => Err(format!("unknown backend `{other}` (builtin, checkpoint)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding the manifest and the files it references.
    pub root: PathBuf,
    /// Manifest file, relative to `root`.
    pub manifest: PathBuf,
    /// Train:val:test ratio.
    pub split_ratios: [u32; 3],
    pub stratify: bool,
    /// Seed of the split and of the training subsample.
    pub split_seed: u64,
    pub subsample_unit: SubsampleUnit,
    /// Training tile edge; 0 uses the model input size.
    pub tile: usize,
    /// Tile stride; 0 uses the tile edge.
    pub stride: usize,
    /// Minimum component size when masks are derived from IF channels.
    pub if_min_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synth"),
            manifest: PathBuf::from("manifest.json"),
            split_ratios: [6, 1, 3],
            stratify: true,
            split_seed: DEFAULT_SEED,
            subsample_unit: SubsampleUnit::Patch,
            tile: 0,
            stride: 0,
            if_min_size: DEFAULT_IF_MIN_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub backend: BackendKind,
    /// Checkpoint for the `checkpoint` backend.
    pub checkpoint: Option<PathBuf>,
    /// Probability threshold of the checkpoint backend.
    pub threshold: f64,
    /// Box displacement for `weak_random`, as a fraction of the box side.
    pub jitter_frac: f64,
    /// Seed of box jitter and of the student noise model.
    pub seed: u64,
    /// Student label directory, relative to the dataset root.
    pub student_dir: PathBuf,
    /// Noise applied to expert labels when the student directory is absent.
    pub student_noise: LabelNoise,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Builtin,
            checkpoint: None,
            threshold: BackendConfig::default().threshold,
            jitter_frac: DEFAULT_JITTER_FRAC,
            seed: DEFAULT_SEED,
            student_dir: PathBuf::from("student"),
            student_noise: LabelNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub backbone_seed: u64,
    /// Pretrained backbone weights; the seeded stand-in backbone otherwise.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(Vec::new());
        Self {
            encoder: m.encoder,
            adapter: m.adapter,
            decoder: m.decoder,
            backbone_seed: m.backbone_seed,
            pretrained: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, classes: Vec<String>, seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            decoder: self.decoder.clone(),
            classes,
            backbone_seed: self.backbone_seed,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Train with the weighted objective from the start.
    pub mocl_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            weight_decay: h.weight_decay,
            patience: h.patience,
            mocl_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub k: usize,
    pub eps_floor: f64,
    pub aggregation: Aggregation,
    pub clamp_negative: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        let h = Hyperparams::refinement();
        let m = MoclParams::default();
        Self {
            enabled: true,
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            weight_decay: h.weight_decay,
            patience: h.patience,
            k: m.k,
            eps_floor: m.eps_floor,
            aggregation: m.aggregation,
            clamp_negative: m.clamp_negative,
        }
    }
}

impl RefineConfig {
    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            patience: self.patience,
            seed,
        }
    }

    pub fn mocl(&self) -> MoclParams {
        MoclParams {
            k: self.k,
            eps_floor: self.eps_floor,
            aggregation: self.aggregation,
            clamp_negative: self.clamp_negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split scored by the eval stage: `test`, `val` or `train`.
    pub split: String,
    pub threshold: f64,
    pub min_instance_size: usize,
    pub iou_threshold: f64,
    pub best_f1_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalParams::default();
        Self {
            split: "test".into(),
            threshold: p.threshold,
            min_instance_size: p.min_instance_size,
            iou_threshold: p.iou_threshold,
            best_f1_step: p.best_f1_step,
        }
    }
}

impl EvalConfig {
    pub fn params(&self) -> EvalParams {
        EvalParams {
            threshold: self.threshold,
            min_instance_size: self.min_instance_size,
            iou_threshold: self.iou_threshold,
            best_f1_step: self.best_f1_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form run label; not part of the hash.
    pub name: String,
    /// Run directory; not part of the hash.
    pub out_dir: PathBuf,
    pub condition: Condition,
    pub tier: Tier,
    /// Fraction of training units kept.
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub annotation: AnnotationConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: PathBuf::from("runs/default"),
            condition: Condition::default(),
            tier: Tier::default(),
            fraction: 1.0,
            seeds: vec![DEFAULT_SEED],
            data: DataConfig::default(),
            annotation: AnnotationConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file. Relative `data.root`, `out_dir`, checkpoint and
    /// pretrained paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.root);
        fix(&mut cfg.out_dir);
        if let Some(p) = cfg.annotation.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.model.pretrained.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// The TOML text of [`ExperimentConfig::default`], every default spelled out.
    pub fn default_toml() -> String {
        format!(
            "# mocl-seg experiment configuration; every field shows its default.\n\n{}",
            Self::default().to_toml()
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(invalid(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if self.data.split_ratios.contains(&0) {
            return Err(invalid("split ratios must be positive"));
        }
        if self.annotation.backend == BackendKind::Checkpoint && self.annotation.checkpoint.is_none() {
            return Err(invalid("the checkpoint backend needs annotation.checkpoint"));
        }
        if self.condition == Condition::WeakRandom && self.annotation.jitter_frac <= 0.0 {
            return Err(invalid("weak_random needs annotation.jitter_frac > 0"));
        }
        if !["test", "val", "train"].contains(&self.eval.split.as_str()) {
            return Err(invalid(format!(
                "eval.split must be test, val or train, got `{}`",
                self.eval.split
            )));
        }
        if self.train.batch_size == 0 || self.refine.batch_size == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        self.model
            .model_config(vec!["_".into()], 0)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Tile edge and stride of training patches.
    pub fn tiling(&self) -> (usize, usize) {
        let tile = if self.data.tile == 0 {
            self.model.encoder.input_size
        } else {
            self.data.tile
        };
        let stride = if self.data.stride == 0 { tile } else { self.data.stride };
        (tile, stride)
    }

    /// Row label in comparison tables.
    pub fn label(&self) -> String {
        match self.tier {
            Tier::Expert => self.condition.as_str().to_string(),
            Tier::Student => format!("{}/student", self.condition.as_str()),
        }
    }

    /// Method name of the final model.
    pub fn method(&self) -> &'static str {
        if self.refine.enabled {
            "adapter+mocl"
        } else {
            "adapter"
        }
    }

    /// Hash of every semantic field; `name` and `out_dir` are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes to JSON");
        if let Some(m) = v.as_object_mut() {
            m.remove("name");
            m.remove("out_dir");
        }
        hash_value(&v)
    }
}

/// sha256 of the canonical (sorted-key, compact) JSON form of `value`.
pub fn hash_value(value: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this is canonical
    let text = serde_json::to_string(value).expect("JSON value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of any serializable value, e.g. a config section.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    hash_value(&serde_json::to_value(value).expect("value serializes to JSON"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toml_round_trips() {
        let text = ExperimentConfig::default_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, ExperimentConfig::default());
        for key in [
            "split_ratios = [",
            "jitter_frac = 0.1",
            "bottleneck_dim = 16",
            "embed_channels = 32",
            "patience = 20",
            "eps_floor = 0.05",
            "k = 64",
            "best_f1_step = 0.01",
            "min_instance_size = 10",
            "input_size = 128",
            "dropout = 0.1",
            "boundary_px = 2",
        ] {
            assert!(text.contains(key), "default.toml lacks `{key}`");
        }
    }

    #[test]
    fn hash_ignores_order_name_and_out_dir() {
        let a = ExperimentConfig::from_toml("fraction = 0.5\nseeds = [1, 2]\n[train]\nepochs = 3\n").unwrap();
        let b = ExperimentConfig::from_toml("[train]\nepochs = 3\n\n[data]\n").unwrap();
        let b = ExperimentConfig {
            fraction: 0.5,
            seeds: vec![1, 2],
            name: "other".into(),
            out_dir: "elsewhere".into(),
            ..b
        };
        assert_eq!(a.hash(), b.hash());
        let reordered = ExperimentConfig::from_toml("seeds = [1, 2]\nfraction = 0.5\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(a.hash(), reordered.hash());
    }

    #[test]
    fn hash_changes_with_any_semantic_field() {
        let base = ExperimentConfig::default();
        let variants = [
            ExperimentConfig {
                fraction: 0.04,
                ..base.clone()
            },
            ExperimentConfig {
                condition: Condition::Complete,
                ..base.clone()
            },
            ExperimentConfig {
                tier: Tier::Student,
                ..base.clone()
            },
            ExperimentConfig {
                seeds: vec![41],
                ..base.clone()
            },
        ];
        let mut hashes: Vec<String> = variants.iter().map(|c| c.hash()).collect();
        let mut t = base.clone();
        t.train.learning_rate = 5e-4;
        hashes.push(t.hash());
        let mut r = base.clone();
        r.refine.eps_floor = 0.0;
        hashes.push(r.hash());
        let mut m = base.clone();
        m.model.adapter.bottleneck_dim = 8;
        hashes.push(m.hash());
        hashes.push(base.hash());
        let n = hashes.len();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), n);
    }

    #[test]
    fn validation_errors() {
        for text in [
            "fraction = 0.0",
            "fraction = 1.5",
            "seeds = []",
            "seeds = [1, 1]",
            "unknown_key = 3",
            "condition = \"weak\"",
            "[annotation]\nbackend = \"checkpoint\"",
            "[eval]\nsplit = \"holdout\"",
            "[model.encoder]\npatch_size = 7",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(PipelineError::Config(_))),
                "accepted: {text}"
            );
        }
    }
}
