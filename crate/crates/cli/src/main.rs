use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mocl_core::metrics::{compare_reports, MetricsReport};
use mocl_core::synth::{generate_synthetic_dataset, SynthConfig};
use mocl_core::{data_ingest::DEFAULT_SEED, io};
use mocl_seg::config::BackendKind;
use mocl_seg::matrix::{MATRIX_FILE, REF_MARK};
use mocl_seg::pipeline::{eval_checkpoint, refine_checkpoint};
use mocl_seg::{
    emit_report, expand_grid, load_matrix, run_matrix, run_pipeline, Condition, ExperimentConfig, MatrixManifest,
    PipelineError, RunOptions, Stage, Tier,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "mocl-seg",
    version,
    about = "Box-supervised nuclei segmentation with corrective refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with masks, IF channels and tight boxes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_patches: usize,
        #[arg(long, value_delimiter = ',', default_value = "podocyte,mesangial")]
        classes: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Print (or write) the default configuration.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split the dataset and subsample training patches.
    Prepare(Common),
    /// Convert boxes (or masks) into training labels.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backend: Option<BackendKind>,
        /// Checkpoint of the `checkpoint` backend.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the adapters and decoder.
    Train(Common),
    /// Corrective refinement of the trained model, or of `--checkpoint`.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        eps_floor: Option<f64>,
    },
    /// Run the full pipeline and score it, or score `--checkpoint`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Paired Wilcoxon comparison of two metric reports.
    Compare {
        #[arg(long, num_args = 2, required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "dice")]
        metric: Vec<String>,
    },
    /// Run a condition × fraction grid and write the comparison report.
    Matrix {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "complete,weak_tight")]
        conditions: Vec<Condition>,
        #[arg(long, value_delimiter = ',', default_value = "expert")]
        tiers: Vec<Tier>,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.04")]
        fractions: Vec<f64>,
        /// Name of the reference run; the first grid cell by default.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Rebuild the comparison report of a finished matrix.
    Report {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; its directory becomes the dataset root.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    condition: Option<Condition>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Rerun stages whose outputs are current.
    #[arg(long)]
    force: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

impl Common {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(m) = &self.manifest {
            cfg.data.root = m.parent().map(Path::to_path_buf).unwrap_or_default();
            cfg.data.manifest = m.file_name().context("--manifest names no file")?.into();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(f) = self.fraction {
            cfg.fraction = f;
        }
        if let Some(c) = self.condition {
            cfg.condition = c;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        Ok(cfg)
    }

    fn options(&self, until: Stage) -> RunOptions {
        RunOptions {
            force: self.force,
            until: Some(until),
        }
    }
}

fn stage(common: &Common, cfg: ExperimentConfig, until: Stage) -> anyhow::Result<()> {
    cfg.validate()?;
    let record = run_pipeline(&cfg, &common.options(until))?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n_patches,
            classes,
            seed,
            size,
        } => {
            if n_patches == 0 {
                bail!(PipelineError::Config("--n-patches must be at least 1".into()));
            }
            let cfg = SynthConfig {
                size,
                ..SynthConfig::default()
            };
            let m = generate_synthetic_dataset(&out, n_patches, &classes, seed, &cfg)?;
            tracing::info!(samples = m.samples.len(), out = %out.display(), "synthetic dataset written");
        }
        Command::DefaultConfig { out } => {
            let text = ExperimentConfig::default_toml();
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Prepare(c) => stage(&c, c.resolve()?, Stage::Prepare)?,
        Command::Annotate {
            common,
            backend,
            checkpoint,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = backend {
                cfg.annotation.backend = b;
            }
            if checkpoint.is_some() {
                cfg.annotation.checkpoint = checkpoint;
            }
            stage(&common, cfg, Stage::Annotate)?;
        }
        Command::Train(c) => stage(&c, c.resolve()?, Stage::Train)?,
        Command::Refine {
            common,
            checkpoint,
            k,
            eps_floor,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(k) = k {
                cfg.refine.k = k;
            }
            if let Some(e) = eps_floor {
                cfg.refine.eps_floor = e;
            }
            match checkpoint {
                Some(ckpt) => {
                    cfg.validate()?;
                    let out = cfg.out_dir.join("refine_checkpoint");
                    let history = refine_checkpoint(&cfg, &ckpt, &out)?;
                    println!("{}", serde_json::to_string_pretty(&history)?);
                }
                None => stage(&common, cfg, Stage::Refine)?,
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            match checkpoint {
                Some(ckpt) => {
                    cfg.validate()?;
                    let out = cfg.out_dir.join("eval_checkpoint");
                    let report = eval_checkpoint(&cfg, &ckpt, &out)?;
                    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
                }
                None => stage(&common, cfg, Stage::Eval)?,
            }
        }
        Command::Compare { reports, metric } => {
            let a: MetricsReport = io::read_json(&reports[0])?;
            let b: MetricsReport = io::read_json(&reports[1])?;
            println!(
                "{:<12} {:>10} {:>10} {:>6} {:>10} {:>10}",
                "metric", "mean_a", "mean_b", "n", "W", "p"
            );
            for m in &metric {
                let c = compare_reports(&a, &b, m).map_err(|e| PipelineError::Comparison(e.to_string()))?;
                let n = a.paired_values(&b, m)?.0.len();
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                let p = c.p_value.map_or("degenerate".to_string(), |p| format!("{p:.6}"));
                println!(
                    "{:<12} {:>10} {:>10} {:>6} {:>10} {:>10}",
                    m,
                    fmt(a.mean(m)),
                    fmt(b.mean(m)),
                    n,
                    fmt(c.statistic),
                    p
                );
            }
        }
        Command::Matrix {
            config,
            conditions,
            tiers,
            fractions,
            reference,
            out,
            force,
        } => {
            let base = load_config(config.as_deref())?;
            let configs = expand_grid(&base, &conditions, &tiers, &fractions, &out);
            for c in &configs {
                c.validate()?;
            }
            let reference = match reference {
                None => 0,
                Some(name) => configs
                    .iter()
                    .position(|c| c.name == name)
                    .ok_or_else(|| PipelineError::Config(format!("no grid cell named `{name}`")))?,
            };
            let opts = RunOptions { force, until: None };
            let (table, _) = run_matrix(&configs, reference, &opts)?;
            let manifest = MatrixManifest {
                runs: configs.iter().map(|c| c.out_dir.clone()).collect(),
                reference,
            };
            io::write_json(&out.join(MATRIX_FILE), &manifest)?;
            let files = emit_report(&table, &out)?;
            tracing::info!(rows = table.rows.len(), reference = %REF_MARK, files = files.len(), "matrix report written");
        }
        Command::Report { matrix, out } => {
            let table = load_matrix(&matrix)?;
            let files = emit_report(&table, out.as_deref().unwrap_or(&matrix))?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let pipeline = e.downcast_ref::<PipelineError>();
            let code = pipeline.map_or(3, PipelineError::exit_code);
            let stage = pipeline.and_then(PipelineError::stage);
            // pipeline errors already carry their cause in the message
            let message = match pipeline {
                Some(p) => p.to_string(),
                None => format!("{e:#}"),
            };
            tracing::error!(stage, code, error = %message, "failed");
            ExitCode::from(code as u8)
        }
    }
}
