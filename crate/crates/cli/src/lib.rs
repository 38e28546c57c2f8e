//! Subcommands behind the `drft` binary.

pub mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use drft::data::{generate_synthetic, separability_probe, Dataset};
use drft::model::Sample;
use drft::train::{build_samples, EpochStats, Evaluation, Trainer, EPOCH_CSV_HEADER};
use drft::{verify, OpKind};

pub use config::{RunConfig, OUTPUT_DIR_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_CSV_FILE: &str = "epochs.csv";

pub fn eval_csv_file(split: &str) -> String {
    format!("eval_{split}.csv")
}

#[derive(Debug, Parser)]
#[command(name = "drft", version, about = "Multi-modal text-guided video temporal grounding")]
pub struct Cli {
    /// Run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` (and `synth.seed` for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and check that its signatures are separable.
    Synth,
    /// Train, writing per-epoch losses and a checkpoint to the output directory.
    Train {
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `data.test_split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Finite-difference gradient checks on every op, every module and the full loss.
    Gradcheck {
        /// Corrupt the backward pass of one op (e.g. `sigmoid`) to show the check catches it.
        #[arg(long, value_parser = parse_op)]
        fault: Option<OpKind>,
    },
}

fn parse_op(name: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(name).ok_or_else(|| format!("unknown op {name:?}"))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if matches!(cli.command, Command::Synth) {
            cfg.synth.seed = seed;
        }
    }
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train { checkpoint } => cmd_train(&cfg, checkpoint.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Eval { checkpoint, split } => {
            let split = split.unwrap_or_else(|| cfg.test_split.clone());
            let ck = checkpoint.unwrap_or_else(|| cfg.resolved_output_dir().join(CHECKPOINT_FILE));
            let ev = cmd_eval(&cfg, &ck, &split)?;
            print!("{}", ev.csv(&split));
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { fault } => cmd_gradcheck(fault),
    }
}

/// Writes the dataset to `data.dir` only when the separability probe passes.
pub fn cmd_synth(cfg: &RunConfig) -> Result<ExitCode> {
    let ds = generate_synthetic(&cfg.synth)?;
    let report = separability_probe(&ds.train, &ds.features, &ds.categories)?;
    print!("{report}");
    if !report.passed() {
        eprintln!(
            "separability probe failed: signature strength {} against noise {} does not make the coding modality separable; dataset not written",
            cfg.synth.strength, cfg.synth.noise
        );
        return Ok(ExitCode::FAILURE);
    }
    ds.write(&cfg.data_dir)?;
    println!(
        "wrote {} train and {} test videos to {}",
        ds.train.len(),
        ds.test.len(),
        cfg.data_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<(Dataset, Vec<Sample<f32>>)> {
    let ds = Dataset::load(&cfg.data_dir, split, &cfg.streams)
        .with_context(|| format!("loading split {split:?} from {}", cfg.data_dir.display()))?;
    let samples = build_samples(&ds, &cfg.streams, cfg.oov)?;
    if samples.is_empty() {
        bail!("split {split:?} has no annotations");
    }
    Ok((ds, samples))
}

fn trainer_for(cfg: &RunConfig, ds: &Dataset, samples: &[Sample<f32>]) -> Result<Trainer> {
    let mut dims = cfg.synth.feature_dims;
    for f in &samples[0].features {
        dims[f.modality.index()] = f.values.cols();
    }
    let model = cfg.model_config(ds.vocabulary.len(), dims)?;
    Ok(Trainer::new(model, cfg.train_config())?)
}

/// Trains up to `train.epochs` total epochs; returns the stats of the epochs run here.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<EpochStats>> {
    let (ds, samples) = load_split(cfg, &cfg.train_split)?;
    let mut trainer = trainer_for(cfg, &ds, &samples)?;
    if let Some(ck) = checkpoint {
        trainer
            .load(ck)
            .with_context(|| format!("resuming from {}", ck.display()))?;
    }
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let csv_path = out.join(EPOCH_CSV_FILE);
    let fresh = trainer.epoch() == 0 || !csv_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&csv_path)
        .with_context(|| format!("opening {}", csv_path.display()))?;
    if fresh {
        writeln!(csv, "{EPOCH_CSV_HEADER}")?;
    }
    let mut history = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let stats = trainer.train_epoch(&samples)?;
        writeln!(csv, "{}", stats.csv_row())?;
        csv.flush()?;
        trainer.save(&out.join(CHECKPOINT_FILE))?;
        println!(
            "epoch {:>4}  loss {:.4}  train mIoU {:.2}",
            stats.epoch, stats.losses.total, stats.train_miou
        );
        history.push(stats);
    }
    if history.is_empty() {
        trainer.save(&out.join(CHECKPOINT_FILE))?;
    }
    Ok(history)
}

/// Evaluates `checkpoint` on `split` and writes the per-category CSV.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<Evaluation> {
    let (ds, samples) = load_split(cfg, split)?;
    let mut trainer = trainer_for(cfg, &ds, &samples)?;
    trainer
        .load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let ev = trainer.evaluate(&samples)?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(eval_csv_file(split)), ev.csv(split))?;
    Ok(ev)
}

pub fn cmd_gradcheck(fault: Option<OpKind>) -> Result<ExitCode> {
    let report = verify::run_suite(fault)?;
    print!("{report}");
    if report.passed() {
        println!("all {} checks passed", report.rows.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", report.failures().join(", "));
        Ok(ExitCode::FAILURE)
    }
}

