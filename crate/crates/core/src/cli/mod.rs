//! The `vapaad` command line: `train`, `predict`, `eval` and `export`.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 for usage errors.

mod checkpoint;
mod commands;
mod config;
mod export;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use checkpoint::{encode_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use commands::{
    checkpoint_name, data_source, eval, export_npy, export_source, fit_sequence, frames_from_npy,
    load_dataset, predict, train, EvalReport, TrainSummary, FINAL_CHECKPOINT, METRICS_LOG,
    SUMMARY_FILE, TIMINGS_LOG,
};
pub use config::{DataConfig, Precision, RunConfig, RunSettings};
pub use export::{export_frames, frame_file_name, frames_of, quantize, GrayFrame, ImageFormat};

use crate::data::load_npy;
use crate::error::Result;
use crate::training::LossMode;

#[derive(Debug, Parser)]
#[command(name = "vapaad", version, about = "Next-frame video prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write logs and checkpoints.
    Train(TrainArgs),
    /// Generate future frames from a checkpoint.
    Predict(PredictArgs),
    /// Report validation metrics of a checkpoint.
    Eval(EvalArgs),
    /// Write the frames of an NPY file as images.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; keys it omits keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `auto`, `synthetic`, a URL or an NPY path.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    /// Freeze the attention query and key projections.
    #[arg(long)]
    stop_grad: bool,
    /// Start from the small laptop-sized preset.
    #[arg(long)]
    desk_scale: bool,
    /// Continue from a checkpoint, using the configuration stored in it.
    #[arg(long, conflicts_with_all = ["config", "seed", "loss_mode", "stop_grad", "desk_scale"])]
    resume: Option<PathBuf>,
    /// Total number of steps, overriding the epoch count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// NPY file of context frames, `(T, H, W)` or `(T, 1, H, W)`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    #[arg(long, default_value = "pgm")]
    format: ImageFormat,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML whose `[data]` and `[run]` sections override the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    split_fraction: Option<f64>,
    /// Seed of the train/validation split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Sequence to export from a raw `(F, N, H, W)` dataset array.
    #[arg(long)]
    sequence: Option<usize>,
    #[arg(long, default_value = "frames")]
    out: PathBuf,
    #[arg(long, default_value = "pgm")]
    format: ImageFormat,
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn train_config(args: &TrainArgs) -> Result<(RunConfig, Option<Checkpoint>)> {
    let (mut cfg, resume) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let base = if args.desk_scale {
                RunConfig::desk()
            } else {
                RunConfig::default()
            };
            let mut cfg = match &args.config {
                Some(path) => RunConfig::from_file(&base, path)?,
                None => base,
            };
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            if let Some(mode) = args.loss_mode {
                cfg.train.loss_mode = mode;
            }
            if args.stop_grad {
                cfg.model.stop_grad = true;
            }
            (cfg, None)
        }
    };
    if let Some(data) = &args.data {
        cfg.data.source = data.clone();
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = Some(steps);
    }
    cfg.validate()?;
    Ok((cfg, resume))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let (cfg, resume) = train_config(args)?;
    let summary = with_precision!(cfg.precision, train(&cfg, resume, &args.out))?;
    println!(
        "{}",
        serde_json::to_string(&summary).map_err(|e| crate::Error::invalid(e.to_string()))?
    );
    Ok(())
}

fn predict_with<T: crate::Scalar>(ck: Checkpoint, args: &PredictArgs) -> Result<Vec<PathBuf>> {
    let model = ck.into_trainer::<T>()?.model;
    let context = frames_from_npy::<T>(&load_npy(&args.input)?)?;
    predict(&model, &context, args.horizon, &args.out, args.format)
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let paths = with_precision!(ck.config.precision, predict_with(ck, args))?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn eval_with<T: crate::Scalar>(ck: Checkpoint, cfg: &RunConfig) -> Result<EvalReport> {
    let model = ck.into_trainer::<T>()?.model;
    eval(&model, cfg)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(path) = &args.config {
        let overlay = RunConfig::from_file(&cfg, path)?;
        cfg.data = overlay.data;
        cfg.run = overlay.run;
    }
    if let Some(data) = &args.data {
        cfg.data.source = data.clone();
    }
    if let Some(f) = args.split_fraction {
        cfg.data.test_fraction = f;
    }
    if let Some(seed) = args.seed {
        cfg.data.split_seed = seed;
    }
    cfg.validate()?;
    let report = with_precision!(cfg.precision, eval_with(ck, &cfg))?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| crate::Error::invalid(e.to_string()))?
    );
    println!("sequences  {:>10}", report.sequences);
    println!("bce        {:>10.6}", report.metrics.bce);
    println!("mse        {:>10.6}", report.metrics.mse);
    println!("accuracy   {:>10.6}", report.metrics.accuracy);
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    for p in export_npy(&args.input, args.sequence, &args.out, args.format)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Export(a) => run_export(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Reads the checkpoint at `path` and rebuilds its model.
pub fn load_model<T: crate::Scalar>(path: &Path) -> Result<crate::model::VapaadModel<T>> {
    Ok(Checkpoint::read(path)?.into_trainer::<T>()?.model)
}
