//! The training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{instructor_objective, reconstruction_loss, vapaad_objective};
use super::metrics::{Metrics, MetricsAccumulator};
use crate::autodiff::{Tape, Var};
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{InstructorModel, VapaadModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::lit;
use crate::tensor::Tensor;
use crate::Scalar;

/// Stream ids carving independent sequences out of one seed.
const AUGMENT_STREAM: u64 = 1;
const INSTRUCTOR_STREAM: u64 = 2;
const ORDER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Per-pixel BCE against the target frames; the instructor is unused.
    #[default]
    Reconstruction,
    /// The generator side of the minimax game only.
    Adversarial,
    /// Reconstruction plus `λ` times the adversarial term.
    Combined,
}

impl LossMode {
    pub fn uses_instructor(self) -> bool {
        self != LossMode::Reconstruction
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(LossMode::Reconstruction),
            "adversarial" => Ok(LossMode::Adversarial),
            "combined" => Ok(LossMode::Combined),
            _ => Err(Error::Config(format!(
                "unknown loss mode `{s}` (expected reconstruction, adversarial or combined)"
            ))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Reconstruction => "reconstruction",
            LossMode::Adversarial => "adversarial",
            LossMode::Combined => "combined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub optimizer: OptimizerConfig,
    pub loss_mode: LossMode,
    /// Adversarial weight in combined mode.
    pub lambda: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 1,
            steps: None,
            optimizer: OptimizerConfig::default(),
            loss_mode: LossMode::Reconstruction,
            lambda: 0.01,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Optimizer::<f64>::new(self.optimizer).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Every `log_every`-th step is logged, and so is the first.
    pub fn should_log(&self, step: u64) -> bool {
        step == 1 || step.is_multiple_of(self.log_every)
    }

    /// Total steps for a dataset of `n` sequences.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps
            .unwrap_or((self.epochs * n.div_ceil(self.batch_size)) as u64)
    }
}

/// Losses and metrics of one update, measured on the train-mode forward pass
/// before the parameters moved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the step.
    pub step: u64,
    pub loss: f64,
    pub reconstruction: f64,
    pub generator_adversarial: Option<f64>,
    pub instructor: Option<f64>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Owns everything that changes during training, so that the whole state can
/// be checkpointed and resumed exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: VapaadModel<T>,
    pub instructor: Option<InstructorModel<T>>,
    pub optimizer: Optimizer<T>,
    pub instructor_optimizer: Option<Optimizer<T>>,
    /// Augmentation randomness.
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: u64,
}

fn finite(v: f64, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{term} loss")))
    }
}

fn grads_of<T: Scalar>(tape: &Tape<T>, params: &[Var<'_, T>]) -> Vec<Option<Tensor<T>>> {
    params.iter().map(|&p| tape.grad(p)).collect()
}

impl<T: Scalar> Trainer<T> {
    /// Fresh optimizer state; the instructor is built (from the seed) only
    /// when the loss mode needs it.
    pub fn new(model: VapaadModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (instructor, instructor_optimizer) = if config.loss_mode.uses_instructor() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(INSTRUCTOR_STREAM);
            (
                Some(InstructorModel::build(&mut rng)),
                Some(Optimizer::new(config.optimizer)?),
            )
        } else {
            (None, None)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(AUGMENT_STREAM);
        Ok(Self {
            config,
            optimizer: Optimizer::new(config.optimizer)?,
            model,
            instructor,
            instructor_optimizer,
            rng,
            step: 0,
        })
    }

    /// Sequence indices of the batch used by 0-based step `step`. Each epoch
    /// visits every sequence once in an order fixed by the seed and the
    /// epoch number; the last batch of an epoch may be short.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size;
        let per_epoch = n.div_ceil(b) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(ORDER_STREAM_BASE + epoch);
        order.shuffle(&mut rng);
        order[k * b..((k + 1) * b).min(n)].to_vec()
    }

    /// One update on `(x, y)`, both `(B, T, 1, H, W)`.
    ///
    /// Every gradient is computed and checked before any parameter moves, so
    /// a failed step leaves the trainer untouched apart from the consumed
    /// augmentation draws.
    pub fn train_step(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<StepRecord> {
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "inputs {:?} and targets {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let mode = self.config.loss_mode;
        let tape = Tape::new();
        let fwd = self.model.forward_on_tape(
            &tape,
            tape.constant(x.clone()),
            Mode::Train,
            &mut self.rng,
        )?;
        let target = tape.constant(y.clone());
        let recon = reconstruction_loss(fwd.output, target)?;
        let recon_value = finite(
            recon.value().item()?.to_f64().unwrap_or(f64::NAN),
            "reconstruction",
        )?;

        let mut adv_value = None;
        let total = match (&self.instructor, mode) {
            (_, LossMode::Reconstruction) => recon,
            (Some(inst), _) => {
                let adv = vapaad_objective(&tape, inst, fwd.output)?;
                adv_value = Some(finite(
                    adv.value().item()?.to_f64().unwrap_or(f64::NAN),
                    "generator adversarial",
                )?);
                if mode == LossMode::Combined {
                    recon.add(adv.scale(lit(self.config.lambda))?)?
                } else {
                    adv
                }
            }
            (None, _) => {
                return Err(Error::invalid(format!(
                    "{mode} training needs an instructor"
                )))
            }
        };
        let loss_value = finite(total.value().item()?.to_f64().unwrap_or(f64::NAN), "total")?;
        tape.backward(total)?;
        let grads = grads_of(&tape, &fwd.params);
        let pred = fwd.output.value().clone();
        let metrics = Metrics::compute(&pred, y)?;

        // the instructor sees the generated batch as a constant
        let mut inst_update = None;
        if let Some(inst) = &self.instructor {
            let itape = Tape::new();
            let (l, params) = instructor_objective(
                &itape,
                inst,
                itape.constant(y.clone()),
                itape.constant(pred),
            )?;
            let v = finite(l.value().item()?.to_f64().unwrap_or(f64::NAN), "instructor")?;
            itape.backward(l)?;
            inst_update = Some((v, grads_of(&itape, &params)));
        }

        Optimizer::validate(&self.model.named_params_mut(), &grads)?;
        if let (Some(inst), Some((_, g))) = (&mut self.instructor, &inst_update) {
            Optimizer::validate(&inst.named_params_mut(), g)?;
        }
        self.optimizer
            .step(&mut self.model.named_params_mut(), &grads)?;
        if let (Some(inst), Some(opt), Some((_, g))) = (
            &mut self.instructor,
            &mut self.instructor_optimizer,
            &inst_update,
        ) {
            opt.step(&mut inst.named_params_mut(), g)?;
        }
        self.model.apply_batch_stats(&fwd.batch_stats)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: loss_value,
            reconstruction: recon_value,
            generator_adversarial: adv_value,
            instructor: inst_update.map(|(v, _)| v),
            metrics,
        })
    }

    /// Runs steps until `total_steps` have completed, handing every record
    /// to `on_step` (see [`TrainConfig::should_log`] for the log cadence).
    pub fn run(
        &mut self,
        data: &SequenceDataset<T>,
        total_steps: u64,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<Option<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let mut last = None;
        while self.step < total_steps {
            let idx = self.batch_indices(data.len(), self.step);
            let (x, y) = data.gather(&idx)?;
            let rec = self.train_step(&x, &y)?;
            on_step(self, &rec)?;
            last = Some(rec);
        }
        Ok(last)
    }
}

/// Inference-mode metrics over every pair of `data`, in `batch_size` chunks.
pub fn evaluate<T: Scalar>(
    model: &VapaadModel<T>,
    data: &SequenceDataset<T>,
    batch_size: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut acc = MetricsAccumulator::default();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (x, y) = data.gather(chunk)?;
        acc.add(&model.predict(&x)?, &y)?;
    }
    acc.finish()
}
