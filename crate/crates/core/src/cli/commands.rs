//! The work behind each subcommand, independent of argument parsing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{DataConfig, RunConfig};
use super::export::{export_frames, frames_of, GrayFrame, ImageFormat};
use crate::data::{
    cache_path, fetch_dataset, load_npy, make_shifted_pairs, pool2x, split, write_atomic,
    DataSource, HttpDownloader, NpyArray, SequenceDataset, MOVING_MNIST_URL,
};
use crate::error::{Error, Result};
use crate::model::VapaadModel;
use crate::scalar::DType;
use crate::tensor::Tensor;
use crate::training::{evaluate, Metrics, StepRecord, Trainer};
use crate::Scalar;

/// Side of the frames the synthetic generator draws, matching the real file.
const RAW_FRAME_SIZE: usize = 64;

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const TIMINGS_LOG: &str = "timings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint.vpad";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.vpad")
}

/// Resolves `cfg.source` to a concrete source.
pub fn data_source(cfg: &DataConfig) -> DataSource {
    let synthetic = DataSource::Synthetic {
        sequences: cfg.n_sequences,
        size: RAW_FRAME_SIZE,
        seed: cfg.synthetic_seed,
    };
    match cfg.source.as_str() {
        "synthetic" => synthetic,
        "auto" => {
            let cached = cache_path(&cfg.cache_dir);
            let mut sidecar = cached.as_os_str().to_owned();
            sidecar.push(".sha256");
            if cached.exists() && Path::new(&sidecar).exists() {
                DataSource::Url(MOVING_MNIST_URL.into())
            } else if cached.exists() {
                DataSource::Path(cached)
            } else {
                synthetic
            }
        }
        s if s.starts_with("http://") || s.starts_with("https://") => DataSource::Url(s.into()),
        s => DataSource::Path(PathBuf::from(s)),
    }
}

fn describe(source: &DataSource) -> String {
    match source {
        DataSource::Url(u) => format!("Moving MNIST ({u}, cached)"),
        DataSource::Path(p) => p.display().to_string(),
        DataSource::Synthetic {
            sequences, seed, ..
        } => {
            format!("synthetic sequences ({sequences}, seed {seed})")
        }
    }
}

/// Halves frames until they have side `size`.
fn fit_frames<T: Scalar>(mut ds: SequenceDataset<T>, size: usize) -> Result<SequenceDataset<T>> {
    while ds.frame_size()[0] > size && ds.frame_size()[0].is_multiple_of(2) {
        ds = ds.downscale2x()?;
    }
    if ds.frame_size() != [size, size] {
        return Err(Error::Dataset(format!(
            "frames of {:?} cannot be pooled down to {size}x{size}",
            ds.frame_size()
        )));
    }
    Ok(ds)
}

/// The shifted-pair dataset described by `cfg`, pooled to the model's
/// frame size.
pub fn load_dataset<T: Scalar>(
    cfg: &DataConfig,
    frame_size: [usize; 2],
) -> Result<SequenceDataset<T>> {
    let source = data_source(cfg);
    eprintln!("data: {}", describe(&source));
    let raw = fetch_dataset(&source, &cfg.cache_dir, &HttpDownloader)?;
    fit_frames(make_shifted_pairs(&raw, cfg.n_sequences)?, frame_size[0])
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub parameters: usize,
    pub last: Option<StepRecord>,
    pub validation: Metrics,
}

fn step_of(line: &str) -> Option<u64> {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()?
        .get("step")?
        .as_u64()
}

/// Keeps the records of steps `1..=step` in a log file, so that a resumed
/// run appends exactly where its checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return write_atomic(path, b"");
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| step_of(l).is_some_and(|s| s <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, kept.as_bytes())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn json<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::invalid(e.to_string()))
}

/// Trains from scratch (or from `resume`) into `out`.
///
/// `metrics.jsonl` depends only on the configuration and data, so two runs
/// with the same seed write identical bytes; wall-clock times go to
/// `timings.jsonl` instead.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
    out: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset::<T>(&cfg.data, cfg.model.frame_size)?;
    let (train_set, val_set) = split(&data, cfg.data.test_fraction, cfg.data.split_seed)?;
    let mut trainer = match resume {
        Some(ck) => ck.into_trainer::<T>()?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = VapaadModel::build(cfg.model.clone(), &mut rng)?;
            Trainer::new(model, cfg.train)?
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let (metrics_path, timings_path) = (out.join(METRICS_LOG), out.join(TIMINGS_LOG));
    truncate_log(&metrics_path, trainer.step)?;
    truncate_log(&timings_path, trainer.step)?;
    let ck_dir = out.join("checkpoints");

    let total = cfg.train.total_steps(train_set.len());
    let mut clock = Instant::now();
    let last = trainer.run(&train_set, total, |tr, rec| {
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        clock = Instant::now();
        if cfg.train.should_log(rec.step) {
            append_line(&metrics_path, &json(rec)?)?;
        }
        append_line(
            &timings_path,
            &json(&serde_json::json!({ "step": rec.step, "wall_ms": wall_ms }))?,
        )?;
        if rec.step % cfg.run.checkpoint_every == 0 {
            save_checkpoint(&ck_dir.join(checkpoint_name(rec.step)), cfg, tr)?;
        }
        Ok(())
    })?;
    save_checkpoint(&out.join(FINAL_CHECKPOINT), cfg, &trainer)?;
    let summary = TrainSummary {
        steps: trainer.step,
        train_sequences: train_set.len(),
        val_sequences: val_set.len(),
        parameters: trainer.model.param_count(),
        last,
        validation: evaluate(&trainer.model, &val_set, cfg.run.eval_batch_size)?,
    };
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Metrics of `model` on the validation split that `cfg.data` describes.
pub fn eval<T: Scalar>(model: &VapaadModel<T>, cfg: &RunConfig) -> Result<EvalReport> {
    let data = load_dataset::<T>(&cfg.data, model.config().frame_size)?;
    let (_, val) = split(&data, cfg.data.test_fraction, cfg.data.split_seed)?;
    Ok(EvalReport {
        sequences: val.len(),
        test_fraction: cfg.data.test_fraction,
        split_seed: cfg.data.split_seed,
        metrics: evaluate(model, &val, cfg.run.eval_batch_size)?,
    })
}

/// `(T, 1, H, W)` frames from an NPY array shaped `(T, H, W)` or
/// `(T, 1, H, W)`. `u8` data is scaled by `1/255`.
pub fn frames_from_npy<T: Scalar>(raw: &NpyArray) -> Result<Tensor<T>> {
    let (t, h, w) = match *raw.shape() {
        [t, h, w] | [t, 1, h, w] => (t, h, w),
        _ => {
            return Err(Error::shape(format!(
                "expected (T, H, W) or (T, 1, H, W) frames, got {:?}",
                raw.shape()
            )))
        }
    };
    if t == 0 {
        return Err(Error::shape("no frames in input"));
    }
    let scale = if raw.dtype() == DType::U8 { 255.0 } else { 1.0 };
    let values: Vec<T> = (0..raw.numel())
        .map(|i| T::from_f64(raw.get_f64(i) / scale).unwrap_or_else(T::nan))
        .collect();
    if values.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Dataset("frame values must lie in [0, 1]".into()));
    }
    Tensor::new([t, 1, h, w], values)
}

/// Pools `(T, 1, H, W)` frames down to side `size` by repeated halving.
pub fn fit_sequence<T: Scalar>(mut frames: Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let side = |f: &Tensor<T>| (f.shape()[2], f.shape()[3]);
    let (h, w) = side(&frames);
    while side(&frames).0 > size && side(&frames).0 % 2 == 0 && side(&frames).1 % 2 == 0 {
        frames = pool2x(&frames)?;
    }
    if side(&frames) != (size, size) {
        return Err(Error::shape(format!(
            "input frames {h}x{w} do not match the model's {size}x{size}"
        )));
    }
    Ok(frames)
}

/// Rolls `model` forward `horizon` frames from the context frames and writes
/// `context_*`, `pred_*` and a side-by-side `strip` image into `dir`.
pub fn predict<T: Scalar>(
    model: &VapaadModel<T>,
    context: &Tensor<T>,
    horizon: usize,
    dir: &Path,
    format: ImageFormat,
) -> Result<Vec<PathBuf>> {
    let context = fit_sequence(context.clone(), model.config().frame_size[0])?;
    let generated = model.rollout(&context, horizon)?;
    let mut paths = export_frames(&context, dir, "context", format)?;
    paths.extend(export_frames(&generated, dir, "pred", format)?);
    let mut all = frames_of(&context)?;
    all.extend(frames_of(&generated)?);
    let strip = dir.join(format!("strip.{}", format.extension()));
    write_atomic(&strip, &GrayFrame::strip(&all)?.encode(format)?)?;
    paths.push(strip);
    Ok(paths)
}

/// Frames to export from an NPY file: `(T, H, W)` and `(T, 1, H, W)` arrays
/// directly, a raw `(F, N, H, W)` dataset array by sequence index.
pub fn export_source<T: Scalar>(raw: &NpyArray, sequence: Option<usize>) -> Result<Tensor<T>> {
    match *raw.shape() {
        [f, n, h, w] if n != 1 || sequence.is_some() => {
            let s = sequence.unwrap_or(0);
            let ds = make_shifted_pairs::<T>(raw, s + 1)?;
            ds.frames().slice0(s, 1)?.reshape([f, 1, h, w])
        }
        _ => frames_from_npy(raw),
    }
}

pub fn export_npy(
    input: &Path,
    sequence: Option<usize>,
    dir: &Path,
    format: ImageFormat,
) -> Result<Vec<PathBuf>> {
    let frames = export_source::<f64>(&load_npy(input)?, sequence)?;
    export_frames(&frames, dir, "frame", format)
}
