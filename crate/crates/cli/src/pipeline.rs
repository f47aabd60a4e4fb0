//! prepare → annotate → train → refine → eval, each stage resumable.
//!
//! Run directory layout:
//!
//! ```text
//! <out_dir>/config.toml  run.json  pipeline.log.jsonl
//! <out_dir>/prepare/     split.json classes.json stage.json
//! <out_dir>/annotate/    <sample>/{masks/,instances.png,provenance.json} stage.json
//! <out_dir>/seed_<s>/train/   adapter.safetensors history.json stage.json
//! <out_dir>/seed_<s>/refine/  refined.safetensors refine_history.json stage.json
//! <out_dir>/seed_<s>/eval/    metrics_adapter.json metrics.json stage.json
//! ```
//!
//! A stage is skipped when its `stage.json` carries the expected hash and its
//! artifacts exist. Stage hashes chain, so a changed upstream setting reruns
//! everything below it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mocl_core::annotator::{BuiltinBackend, PixelAnnotation, PromptableBackend};
use mocl_core::data_ingest::{
    expand_to_patches, load_manifest, parse_patch_id, split_dataset, subsample_training, tile_image, DatasetManifest,
    SplitAssignment, SubsampleUnit,
};
use mocl_core::metrics::{compare_reports, dice, MetricsReport};
use mocl_core::{io, texture, RealMap, RgbImage};
use mocl_model::evaluate::METRICS;
use mocl_model::{
    evaluate_split, load_checkpoint, load_checkpoint_backend, load_pretrained_backbone, refine, save_checkpoint,
    train_adapter, AdapterModel, BackendConfig, EvalSample, TrainLoss, TrainingHistory, TrainingItem,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_of, BackendKind, ExperimentConfig};
use crate::error::{PipelineError, Result};
use crate::events::EventLog;
use crate::labels::{annotate_sample, expert_masks};

pub const LOG_FILE: &str = "pipeline.log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Annotate,
    Train,
    Refine,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Prepare,
        Stage::Annotate,
        Stage::Train,
        Stage::Refine,
        Stage::Eval,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Annotate => "annotate",
            Stage::Train => "train",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rerun stages even when their outputs are current.
    pub force: bool,
    /// Last stage to run; the full pipeline when `None`.
    pub until: Option<Stage>,
}

impl RunOptions {
    pub fn until(stage: Stage) -> Self {
        Self {
            force: false,
            until: Some(stage),
        }
    }
}

/// Contents of a stage's `stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub hash: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    pub artifacts: Vec<PathBuf>,
    /// True when the stored result was reused.
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

/// Summary of one pipeline invocation, saved as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub environment: Environment,
}

impl RunRecord {
    /// Stages that actually executed, in order.
    pub fn executed(&self) -> Vec<(Stage, Option<u64>)> {
        self.stages
            .iter()
            .filter(|s| !s.skipped)
            .map(|s| (s.stage, s.seed))
            .collect()
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn stage_err(stage: Stage, e: PipelineError) -> PipelineError {
    match e {
        already @ PipelineError::Stage { .. } => already,
        other => PipelineError::Stage {
            stage: stage.as_str(),
            source: Box::new(other),
        },
    }
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// Final metrics report of one seed.
pub fn metrics_path(out_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(out_dir, seed).join("eval").join("metrics.json")
}

pub fn split_path(out_dir: &Path) -> PathBuf {
    out_dir.join("prepare").join("split.json")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    Ok(io::write_json(path, v)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(io::read_json(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    log: EventLog,
    record: RunRecord,
}

impl Runner<'_> {
    fn wants(&self, stage: Stage) -> bool {
        self.opts.until.is_none_or(|u| stage <= u)
    }

    /// Runs `body` in `dir` unless a current result exists there.
    fn stage(
        &mut self,
        stage: Stage,
        seed: Option<u64>,
        dir: &Path,
        hash: &str,
        artifacts: &[&str],
        body: impl FnOnce(&Path, &EventLog) -> Result<()>,
    ) -> Result<()> {
        let marker = dir.join("stage.json");
        if !self.opts.force && marker.exists() {
            if let Ok(mut prev) = read_json::<StageRecord>(&marker) {
                if prev.hash == hash && artifacts.iter().all(|a| dir.join(a).exists()) {
                    self.log
                        .emit(json!({"stage": stage.as_str(), "seed": seed, "status": "skipped"}))?;
                    prev.skipped = true;
                    self.record.stages.push(prev);
                    return Ok(());
                }
            }
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| stage_err(stage, PipelineError::io(dir, e)))?;
        }
        create_dir(dir).map_err(|e| stage_err(stage, e))?;
        let started = now();
        self.log
            .emit(json!({"stage": stage.as_str(), "seed": seed, "status": "started"}))?;
        if let Err(e) = body(dir, &self.log) {
            let e = stage_err(stage, e);
            self.log
                .emit(json!({"stage": stage.as_str(), "seed": seed, "status": "failed", "error": e.to_string()}))?;
            return Err(e);
        }
        let rec = StageRecord {
            stage,
            seed,
            hash: hash.to_string(),
            started,
            finished: now(),
            artifacts: artifacts.iter().map(|a| dir.join(a)).collect(),
            skipped: false,
        };
        write_json(&marker, &rec).map_err(|e| stage_err(stage, e))?;
        self.log
            .emit(json!({"stage": stage.as_str(), "seed": seed, "status": "finished"}))?;
        self.record.stages.push(rec);
        Ok(())
    }
}

fn open_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let root = &cfg.data.root;
    if !root.is_dir() {
        return Err(PipelineError::Core(mocl_core::Error::Manifest(format!(
            "dataset root {} does not exist",
            root.display()
        ))));
    }
    Ok(load_manifest(root, &root.join(&cfg.data.manifest))?)
}

/// Split, tiling and training subsample.
pub fn prepare_split(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<SplitAssignment> {
    let r = cfg.data.split_ratios;
    let split = split_dataset(manifest, (r[0], r[1], r[2]), cfg.data.split_seed, cfg.data.stratify)?;
    let (tile, stride) = cfg.tiling();
    let tiles_of = |id: &str| {
        let rec = manifest
            .sample(id)
            .ok_or_else(|| mocl_core::Error::Manifest(format!("unknown sample id `{id}`")))?;
        tile_image(io::image_shape(&manifest.resolve(&rec.image_path))?, tile, stride)
    };
    let unit = cfg.data.subsample_unit;
    let out = match unit {
        SubsampleUnit::Sample => {
            let sub = subsample_training(&split, cfg.fraction, cfg.data.split_seed, unit)?;
            expand_to_patches(&sub, tiles_of)?
        }
        SubsampleUnit::Patch => {
            let patches = expand_to_patches(&split, tiles_of)?;
            subsample_training(&patches, cfg.fraction, cfg.data.split_seed, unit)?
        }
    };
    Ok(out)
}

/// Sample ids whose annotations the train stage needs.
fn annotated_ids(split: &SplitAssignment) -> Vec<String> {
    let mut ids: BTreeSet<String> = split.train.iter().map(|p| parse_patch_id(p).0).collect();
    ids.extend(split.val.iter().cloned());
    ids.into_iter().collect()
}

fn make_backend(cfg: &ExperimentConfig) -> Result<Box<dyn PromptableBackend>> {
    Ok(match cfg.annotation.backend {
        BackendKind::Builtin => Box::new(BuiltinBackend),
        BackendKind::Checkpoint => {
            let path = cfg
                .annotation
                .checkpoint
                .as_ref()
                .expect("validated config has a checkpoint");
            Box::new(load_checkpoint_backend(
                path,
                BackendConfig {
                    threshold: cfg.annotation.threshold,
                },
            )?)
        }
    })
}

fn annotate(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    dir: &Path,
    log: &EventLog,
) -> Result<()> {
    let backend = make_backend(cfg)?;
    let mut dice_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let ids = annotated_ids(split);
    for id in &ids {
        let sample = manifest.load_by_id(id)?;
        let ann = annotate_sample(cfg, manifest, &sample, backend.as_ref())?;
        if let Ok(gt) = expert_masks(manifest, &sample, cfg.data.if_min_size) {
            for (class, g) in manifest.classes.iter().zip(&gt) {
                let e = dice_sum.entry(class.clone()).or_default();
                e.0 += dice(&ann.mask_for(class), g)?;
                e.1 += 1;
            }
        }
        ann.write(&dir.join(id))?;
    }
    let agreement: BTreeMap<String, f64> = dice_sum.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    log.emit(json!({
        "stage": "annotate",
        "samples": ids.len(),
        "backend": backend.name(),
        "condition": cfg.condition.as_str(),
        "label_dice_vs_ground_truth": agreement,
    }))
}

/// Loads a sample image once and keeps its whole-image texture map.
struct SampleCache<'a> {
    manifest: &'a DatasetManifest,
    sigma: f64,
    entries: BTreeMap<String, (RgbImage, RealMap)>,
}

impl<'a> SampleCache<'a> {
    fn new(manifest: &'a DatasetManifest, sigma: f64) -> Self {
        Self {
            manifest,
            sigma,
            entries: BTreeMap::new(),
        }
    }

    fn get(&mut self, id: &str) -> Result<&(RgbImage, RealMap)> {
        if !self.entries.contains_key(id) {
            let rec = self
                .manifest
                .sample(id)
                .ok_or_else(|| mocl_core::Error::Manifest(format!("unknown sample id `{id}`")))?;
            let image = io::read_rgb(&self.manifest.resolve(&rec.image_path))?;
            let tex = texture::extract_texture_features(&image, self.sigma)?;
            self.entries.insert(id.to_string(), (image, tex));
        }
        Ok(&self.entries[id])
    }
}

fn training_items(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    ann_dir: &Path,
) -> Result<(Vec<TrainingItem>, Vec<TrainingItem>)> {
    let size = cfg.model.encoder.input_size;
    let classes = &manifest.classes;
    let mut cache = SampleCache::new(manifest, cfg.model.adapter.texture_sigma);
    let mut anns: BTreeMap<String, PixelAnnotation> = BTreeMap::new();
    let mut item = |patch: &str, y: usize, x: usize, sample: &str| -> Result<TrainingItem> {
        if !anns.contains_key(sample) {
            anns.insert(
                sample.to_string(),
                PixelAnnotation::read(&ann_dir.join(sample), classes)?,
            );
        }
        let crop = anns[sample].crop(y, x, size)?;
        let (image, tex) = cache.get(sample)?;
        let labels = classes.iter().map(|c| crop.mask_for(c)).collect();
        Ok(TrainingItem::with_texture(
            patch,
            image.crop(y, x, size, size)?,
            tex.crop(y, x, size, size)?,
            labels,
        )?)
    };
    let mut train = Vec::with_capacity(split.train.len());
    for p in &split.train {
        let (sample, pos) = parse_patch_id(p);
        let (y, x) = pos.unwrap_or((0, 0));
        train.push(item(p, y, x, &sample)?);
    }
    let (tile, stride) = cfg.tiling();
    let mut val = Vec::new();
    for id in &split.val {
        let rec = manifest.sample(id).expect("split ids come from the manifest");
        for t in tile_image(io::image_shape(&manifest.resolve(&rec.image_path))?, tile, stride)? {
            val.push(item(&format!("{id}@{}_{}", t.y, t.x), t.y, t.x, id)?);
        }
    }
    Ok((train, val))
}

fn eval_samples(cfg: &ExperimentConfig, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<EvalSample>> {
    ids.iter()
        .map(|id| {
            let sample = manifest.load_by_id(id)?;
            let gt_masks = expert_masks(manifest, &sample, cfg.data.if_min_size)?;
            Ok(EvalSample {
                id: id.clone(),
                image: sample.image,
                gt_masks,
                gt_instances: None,
            })
        })
        .collect()
}

fn eval_ids(cfg: &ExperimentConfig, split: &SplitAssignment) -> Vec<String> {
    match cfg.eval.split.as_str() {
        "val" => split.val.clone(),
        "train" => {
            let ids: BTreeSet<String> = split.train.iter().map(|p| parse_patch_id(p).0).collect();
            ids.into_iter().collect()
        }
        _ => split.test.clone(),
    }
}

fn build_model(cfg: &ExperimentConfig, classes: &[String], seed: u64) -> Result<AdapterModel> {
    let mut model = AdapterModel::build(cfg.model.model_config(classes.to_vec(), seed))?;
    if let Some(p) = &cfg.model.pretrained {
        load_pretrained_backbone(&mut model, p)?;
    }
    Ok(model)
}

fn history_event(stage: &str, seed: u64, h: &TrainingHistory, extra: serde_json::Value) -> serde_json::Value {
    let mut v = json!({
        "stage": stage,
        "seed": seed,
        "epochs_run": h.epochs.len(),
        "best_epoch": h.best_epoch,
        "initial_val_dice": h.initial_val_dice,
        "best_val_dice": h.best_val_dice,
        "stopped_early": h.stopped_early,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
        m.extend(e);
    }
    v
}

/// Compares the final report against the adapter-only report on each metric.
fn with_comparisons(mut report: MetricsReport, baseline: &MetricsReport) -> MetricsReport {
    report.comparisons = METRICS
        .iter()
        .filter_map(|m| compare_reports(&report, baseline, m).ok())
        .collect();
    report
}

/// Runs the configured pipeline in `cfg.out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| PipelineError::io(out.join("config.toml"), e))?;
    let log = EventLog::open(&out.join(LOG_FILE))?;
    log.emit(json!({"event": "run", "name": cfg.name, "config_hash": cfg.hash(), "until": opts.until}))?;
    let mut r = Runner {
        cfg,
        opts,
        log,
        record: RunRecord {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            out_dir: out.clone(),
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            environment: Environment::current(),
        },
    };
    let result = run_stages(&mut r);
    let record = r.record;
    write_json(&out.join("run.json"), &record)?;
    result.map(|()| record)
}

fn run_stages(r: &mut Runner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let out = cfg.out_dir.clone();

    let prepare_hash = hash_of(&json!({
        "data": cfg.data,
        "fraction": cfg.fraction,
        "input_size": cfg.model.encoder.input_size,
    }));
    let prepare_dir = out.join("prepare");
    let manifest = open_manifest(cfg).map_err(|e| stage_err(Stage::Prepare, e))?;
    r.stage(
        Stage::Prepare,
        None,
        &prepare_dir,
        &prepare_hash,
        &["split.json", "classes.json"],
        |dir, log| {
            let split = prepare_split(cfg, &manifest)?;
            write_json(&dir.join("split.json"), &split)?;
            write_json(&dir.join("classes.json"), &manifest.classes)?;
            log.emit(json!({
                "stage": "prepare",
                "samples": manifest.samples.len(),
                "train_patches": split.train.len(),
                "val_samples": split.val.len(),
                "test_samples": split.test.len(),
            }))
        },
    )?;
    r.record.artifacts.insert("split".into(), split_path(&out));
    if !r.wants(Stage::Annotate) {
        return Ok(());
    }
    let split: SplitAssignment = read_json(&split_path(&out)).map_err(|e| stage_err(Stage::Prepare, e))?;

    let annotate_hash = hash_of(&json!({
        "prev": prepare_hash,
        "condition": cfg.condition,
        "tier": cfg.tier,
        "annotation": cfg.annotation,
    }));
    let ann_dir = out.join("annotate");
    r.stage(Stage::Annotate, None, &ann_dir, &annotate_hash, &[], |dir, log| {
        annotate(cfg, &manifest, &split, dir, log)
    })?;
    r.record.artifacts.insert("annotations".into(), ann_dir.clone());
    if !r.wants(Stage::Train) {
        return Ok(());
    }

    let mut items: Option<(Vec<TrainingItem>, Vec<TrainingItem>)> = None;
    let mut load_items = || -> Result<(Vec<TrainingItem>, Vec<TrainingItem>)> {
        if items.is_none() {
            items = Some(training_items(cfg, &manifest, &split, &ann_dir)?);
        }
        Ok(items.clone().expect("just loaded"))
    };
    let mut test_set: Option<Vec<EvalSample>> = None;

    for &seed in &cfg.seeds {
        let sdir = seed_dir(&out, seed);
        let train_hash = hash_of(&json!({"prev": annotate_hash, "model": cfg.model, "train": cfg.train, "seed": seed}));
        let train_dir = sdir.join("train");
        let adapter_path = train_dir.join("adapter.safetensors");
        r.stage(
            Stage::Train,
            Some(seed),
            &train_dir,
            &train_hash,
            &["adapter.safetensors", "history.json"],
            |dir, log| {
                let (train, val) = load_items().map_err(|e| stage_err(Stage::Train, e))?;
                log.emit(
                    json!({"stage": "train", "seed": seed, "train_patches": train.len(), "val_patches": val.len()}),
                )?;
                let mut model = build_model(cfg, &manifest.classes, seed)?;
                let before = model.backbone_hash()?;
                let loss = if cfg.train.mocl_loss {
                    TrainLoss::Mocl(cfg.refine.mocl())
                } else {
                    TrainLoss::DiceBce
                };
                let history = train_adapter(&mut model, &train, &val, &cfg.train.hyperparams(seed), &loss)?;
                let after = model.backbone_hash()?;
                save_checkpoint(&model, &dir.join("adapter.safetensors"))?;
                write_json(&dir.join("history.json"), &history)?;
                log.emit(history_event(
                    "train",
                    seed,
                    &history,
                    json!({"backbone_unchanged": before == after}),
                ))
            },
        )?;
        r.record
            .artifacts
            .insert(format!("seed_{seed}/adapter"), adapter_path.clone());
        if !r.wants(Stage::Refine) {
            continue;
        }

        let refine_hash = hash_of(&json!({"prev": train_hash, "refine": cfg.refine}));
        let refine_dir = sdir.join("refine");
        let refined_path = refine_dir.join("refined.safetensors");
        let refine_artifacts: &[&str] = if cfg.refine.enabled {
            &["refined.safetensors", "refine_history.json"]
        } else {
            &[]
        };
        r.stage(
            Stage::Refine,
            Some(seed),
            &refine_dir,
            &refine_hash,
            refine_artifacts,
            |dir, log| {
                if !cfg.refine.enabled {
                    return log.emit(json!({"stage": "refine", "seed": seed, "status": "disabled"}));
                }
                let (train, val) = load_items().map_err(|e| stage_err(Stage::Refine, e))?;
                let mut model = load_checkpoint(&adapter_path)?;
                let before = model.backbone_hash()?;
                let history = refine(
                    &mut model,
                    &train,
                    &val,
                    &cfg.refine.hyperparams(seed),
                    &cfg.refine.mocl(),
                )?;
                let after = model.backbone_hash()?;
                save_checkpoint(&model, &dir.join("refined.safetensors"))?;
                write_json(&dir.join("refine_history.json"), &history)?;
                log.emit(history_event(
                    "refine",
                    seed,
                    &history,
                    json!({"backbone_unchanged": before == after}),
                ))
            },
        )?;
        if cfg.refine.enabled {
            r.record
                .artifacts
                .insert(format!("seed_{seed}/refined"), refined_path.clone());
        }
        if !r.wants(Stage::Eval) {
            continue;
        }

        let eval_hash = hash_of(&json!({"prev": refine_hash, "eval": cfg.eval}));
        let eval_dir = sdir.join("eval");
        r.stage(
            Stage::Eval,
            Some(seed),
            &eval_dir,
            &eval_hash,
            &["metrics.json", "metrics_adapter.json"],
            |dir, log| {
                if test_set.is_none() {
                    test_set = Some(eval_samples(cfg, &manifest, &eval_ids(cfg, &split))?);
                }
                let samples = test_set.as_ref().expect("just loaded");
                let params = cfg.eval.params();
                let adapter = evaluate_split(&load_checkpoint(&adapter_path)?, samples, "adapter", &params)?;
                write_json(&dir.join("metrics_adapter.json"), &adapter)?;
                let report = if cfg.refine.enabled {
                    let refined = evaluate_split(&load_checkpoint(&refined_path)?, samples, cfg.method(), &params)?;
                    with_comparisons(refined, &adapter)
                } else {
                    adapter.clone()
                };
                write_json(&dir.join("metrics.json"), &report)?;
                let means: BTreeMap<&String, f64> = report.aggregate.iter().map(|(k, a)| (k, a.mean)).collect();
                log.emit(json!({
                    "stage": "eval",
                    "seed": seed,
                    "split": cfg.eval.split,
                    "images": samples.len(),
                    "adapter_dice": adapter.mean("dice"),
                    "means": means,
                }))
            },
        )?;
        r.record
            .artifacts
            .insert(format!("seed_{seed}/metrics"), metrics_path(&out, seed));
    }
    Ok(())
}

/// Evaluates an arbitrary checkpoint on the configured split of the run's
/// prepared data and writes `metrics.json` to `out`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    run_pipeline(cfg, &RunOptions::until(Stage::Prepare))?;
    let wrap = |e| stage_err(Stage::Eval, e);
    let manifest = open_manifest(cfg).map_err(wrap)?;
    let split: SplitAssignment = read_json(&split_path(&cfg.out_dir)).map_err(wrap)?;
    let samples = eval_samples(cfg, &manifest, &eval_ids(cfg, &split)).map_err(wrap)?;
    let model = load_checkpoint(checkpoint).map_err(|e| wrap(e.into()))?;
    let report = evaluate_split(&model, &samples, "checkpoint", &cfg.eval.params()).map_err(|e| wrap(e.into()))?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Refines an arbitrary checkpoint on the run's annotations and writes
/// `refined.safetensors` and `refine_history.json` to `out`.
pub fn refine_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<TrainingHistory> {
    run_pipeline(cfg, &RunOptions::until(Stage::Annotate))?;
    let wrap = |e| stage_err(Stage::Refine, e);
    let manifest = open_manifest(cfg).map_err(wrap)?;
    let split: SplitAssignment = read_json(&split_path(&cfg.out_dir)).map_err(wrap)?;
    let (train, val) = training_items(cfg, &manifest, &split, &cfg.out_dir.join("annotate")).map_err(wrap)?;
    let mut model = load_checkpoint(checkpoint).map_err(|e| wrap(e.into()))?;
    let seed = cfg.seeds[0];
    let history = refine(
        &mut model,
        &train,
        &val,
        &cfg.refine.hyperparams(seed),
        &cfg.refine.mocl(),
    )
    .map_err(|e| wrap(e.into()))?;
    create_dir(out)?;
    save_checkpoint(&model, &out.join("refined.safetensors")).map_err(|e| wrap(e.into()))?;
    write_json(&out.join("refine_history.json"), &history)?;
    Ok(history)
}

/// Final reports of every seed of a completed run.
pub fn load_reports(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    cfg.seeds
        .iter()
        .map(|&s| read_json(&metrics_path(&cfg.out_dir, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mocl_core::data_ingest::{SampleRecord, Stratum};

    #[test]
    fn stage_order() {
        assert!(Stage::ALL.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(Stage::Refine.as_str(), "refine");
    }

    #[test]
    fn patch_subsample_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(256, 256, [200, 200, 200]);
        io::write_rgb(&dir.path().join("a.png"), &img).unwrap();
        let manifest = DatasetManifest {
            root_path: dir.path().to_path_buf(),
            classes: vec!["c".into()],
            if_thresholds: BTreeMap::new(),
            samples: (0..200)
                .map(|i| SampleRecord {
                    id: format!("s{i:03}"),
                    image_path: "a.png".into(),
                    if_paths: BTreeMap::new(),
                    mask_paths: BTreeMap::new(),
                    box_path: None,
                    stratum: Stratum::Unknown,
                })
                .collect(),
        };
        let mut cfg = ExperimentConfig::default();
        cfg.data.stratify = false;
        let full = prepare_split(&cfg, &manifest).unwrap();
        assert_eq!((full.train.len(), full.val.len(), full.test.len()), (480, 20, 60));
        for (fraction, n) in [(0.04, 19), (0.005, 2)] {
            cfg.fraction = fraction;
            let s = prepare_split(&cfg, &manifest).unwrap();
            assert_eq!(s.train.len(), n);
            assert!(s.train.iter().all(|p| full.train.contains(p)));
            assert_eq!(s.test, full.test);
        }
        cfg.data.subsample_unit = SubsampleUnit::Sample;
        cfg.fraction = 0.05;
        let s = prepare_split(&cfg, &manifest).unwrap();
        assert_eq!(s.train.len(), 6 * 4);
    }
}
