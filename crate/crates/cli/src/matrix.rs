//! Experiment matrix: several runs on one test split, tabulated against a
//! reference run with paired Wilcoxon tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mocl_core::data_ingest::SplitAssignment;
use mocl_core::io;
use mocl_core::metrics::{wilcoxon_signed_rank, MetricsReport, WilcoxonMode};
use serde::{Deserialize, Serialize};

use crate::config::{Condition, ExperimentConfig, Tier};
use crate::error::{PipelineError, Result};
use crate::pipeline::{load_reports, run_pipeline, split_path, RunOptions, RunRecord};

/// Table columns, in output order.
pub const TABLE_METRICS: [&str; 7] = ["dice", "auc", "recall", "precision", "bestF1", "iou", "aji"];

pub const REF_MARK: &str = "Ref.";
pub const DEGENERATE_MARK: &str = "degenerate";

/// A p-value cell: a number, `Ref.` on the reference row, or `degenerate`
/// when every paired difference is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PCell {
    Value(f64),
    Mark(String),
}

impl PCell {
    pub fn reference() -> Self {
        PCell::Mark(REF_MARK.into())
    }

    pub fn degenerate() -> Self {
        PCell::Mark(DEGENERATE_MARK.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub method: String,
    pub label: String,
    pub fraction: f64,
    pub seeds: usize,
    pub images: usize,
    /// Mean over images of the seed-averaged per-image value; absent when no
    /// image defines the metric.
    pub values: BTreeMap<String, f64>,
    pub p_values: BTreeMap<String, PCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub metrics: Vec<String>,
    /// Index of the reference row.
    pub reference: usize,
    pub rows: Vec<ResultRow>,
}

/// One completed run as it enters the table.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub method: String,
    pub label: String,
    pub fraction: f64,
    pub test_ids: Vec<String>,
    pub reports: Vec<MetricsReport>,
}

impl RunResult {
    /// Reads the reports and split of a finished run.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let split: SplitAssignment = io::read_json(&split_path(&cfg.out_dir))?;
        Ok(Self {
            name: cfg.name.clone(),
            method: cfg.method().to_string(),
            label: cfg.label(),
            fraction: cfg.fraction,
            test_ids: split.test,
            reports: load_reports(cfg)?,
        })
    }
}

/// Per-image values of `metric` averaged over seeds.
fn seed_averaged(reports: &[MetricsReport], metric: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (id, row) in &r.per_image {
            if let Some(v) = row.get(metric) {
                let e = acc.entry(id.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn image_ids(run: &RunResult) -> Result<Vec<String>> {
    let mut ids: Vec<String> = run
        .reports
        .first()
        .map(|r| r.per_image.keys().cloned().collect())
        .unwrap_or_default();
    ids.sort();
    for r in &run.reports {
        if !r.per_image.keys().eq(ids.iter()) {
            return Err(PipelineError::Comparison(format!(
                "seeds of `{}` were evaluated on different images",
                run.name
            )));
        }
    }
    Ok(ids)
}

/// Builds the table; every row is compared with row `reference`.
pub fn assemble_table(runs: &[RunResult], reference: usize) -> Result<ResultTable> {
    let Some(refrun) = runs.get(reference) else {
        return Err(PipelineError::Comparison(format!(
            "reference index {reference} outside {} runs",
            runs.len()
        )));
    };
    let ref_ids = image_ids(refrun)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        if run.reports.is_empty() {
            return Err(PipelineError::Comparison(format!("`{}` has no reports", run.name)));
        }
        if run.test_ids != refrun.test_ids || image_ids(run)? != ref_ids {
            return Err(PipelineError::Comparison(format!(
                "`{}` and reference `{}` use different test splits",
                run.name, refrun.name
            )));
        }
        let mut values = BTreeMap::new();
        let mut p_values = BTreeMap::new();
        for metric in TABLE_METRICS {
            let ours = seed_averaged(&run.reports, metric);
            if !ours.is_empty() {
                values.insert(metric.to_string(), ours.values().sum::<f64>() / ours.len() as f64);
            }
            let cell = if i == reference {
                PCell::reference()
            } else {
                let theirs = seed_averaged(&refrun.reports, metric);
                let (a, b): (Vec<f64>, Vec<f64>) = ours
                    .iter()
                    .filter_map(|(id, v)| theirs.get(id).map(|w| (*v, *w)))
                    .unzip();
                if a.is_empty() {
                    continue;
                }
                match wilcoxon_signed_rank(&a, &b, WilcoxonMode::Auto) {
                    Ok(r) => PCell::Value(r.p_value),
                    Err(mocl_core::Error::DegenerateSample) => PCell::degenerate(),
                    Err(e) => return Err(e.into()),
                }
            };
            p_values.insert(metric.to_string(), cell);
        }
        rows.push(ResultRow {
            name: run.name.clone(),
            method: run.method.clone(),
            label: run.label.clone(),
            fraction: run.fraction,
            seeds: run.reports.len(),
            images: ref_ids.len(),
            values,
            p_values,
        });
    }
    Ok(ResultTable {
        metrics: TABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        reference,
        rows,
    })
}

/// Saved next to the matrix runs so the table can be rebuilt later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub runs: Vec<PathBuf>,
    pub reference: usize,
}

pub const MATRIX_FILE: &str = "matrix.json";

/// Runs every config (each in its own directory) and tabulates them
/// against `configs[reference]`.
pub fn run_matrix(
    configs: &[ExperimentConfig],
    reference: usize,
    opts: &RunOptions,
) -> Result<(ResultTable, Vec<RunRecord>)> {
    if configs.len() < 2 {
        return Err(PipelineError::Config("a matrix needs at least two configs".into()));
    }
    if reference >= configs.len() {
        return Err(PipelineError::Config(format!(
            "reference {reference} outside {} configs",
            configs.len()
        )));
    }
    let mut dirs: Vec<&Path> = configs.iter().map(|c| c.out_dir.as_path()).collect();
    dirs.sort();
    dirs.dedup();
    if dirs.len() != configs.len() {
        return Err(PipelineError::Config("matrix configs must use distinct out_dir".into()));
    }
    let mut records = Vec::with_capacity(configs.len());
    for cfg in configs {
        records.push(run_pipeline(
            cfg,
            &RunOptions {
                until: None,
                ..opts.clone()
            },
        )?);
    }
    let runs: Vec<RunResult> = configs.iter().map(RunResult::load).collect::<Result<_>>()?;
    Ok((assemble_table(&runs, reference)?, records))
}

/// `condition × fraction` variants of `base`, written under `out_root`.
pub fn expand_grid(
    base: &ExperimentConfig,
    conditions: &[Condition],
    tiers: &[Tier],
    fractions: &[f64],
    out_root: &Path,
) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for &tier in tiers {
        for &condition in conditions {
            for &fraction in fractions {
                let tier_tag = match tier {
                    Tier::Expert => "",
                    Tier::Student => "_student",
                };
                let name = format!("{}{tier_tag}_f{fraction}", condition.as_str());
                out.push(ExperimentConfig {
                    name: name.clone(),
                    out_dir: out_root.join(&name),
                    condition,
                    tier,
                    fraction,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Rebuilds the table of a finished matrix from its `matrix.json`.
pub fn load_matrix(matrix_dir: &Path) -> Result<ResultTable> {
    let manifest: MatrixManifest = io::read_json(&matrix_dir.join(MATRIX_FILE))?;
    let runs = manifest
        .runs
        .iter()
        .map(|dir| {
            let path = dir.join("config.toml");
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
            let cfg = ExperimentConfig {
                out_dir: dir.clone(),
                ..ExperimentConfig::from_toml(&text)?
            };
            RunResult::load(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_table(&runs, manifest.reference)
}
