//! Per-channel batch normalization for `(.., C, H, W)` feature maps.
//!
//! Statistics are taken jointly over every axis except the channel axis
//! (batch, time and space), using the biased variance.

use super::{zeros_param, Mode};
use crate::autodiff::{BackwardContext, Function, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::lit;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `None` until initialized; inference refuses to run without them.
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Per-channel mean and biased variance of one train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `γ = 1`, `β = 0`, running statistics uninitialized.
    pub fn new(channels: usize) -> Self {
        let mut gamma = zeros_param(&[channels]);
        gamma.data_mut().fill(T::one());
        Self {
            gamma,
            beta: zeros_param(&[channels]),
            running_mean: None,
            running_var: None,
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    /// Running mean 0 and variance 1, so inference on a fresh model is the
    /// affine map `γ·x/√(1+ε) + β`.
    pub fn init_running_stats(&mut self) {
        let c = self.channels();
        self.running_mean = Some(Tensor::zeros([c]));
        self.running_var = Some(Tensor::full([c], T::one()));
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    /// Non-trainable state, present only once initialized.
    pub fn named_buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(m) = &self.running_mean {
            out.push(("running_mean", m));
        }
        if let Some(v) = &self.running_var {
            out.push(("running_var", v));
        }
        out
    }

    /// `r ← m·r + (1 − m)·batch` for both running statistics. Uninitialized
    /// statistics are seeded with the batch values.
    pub fn update_running(&mut self, stats: &BatchStats<T>) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(format!(
                "batch statistics for {} channels, layer has {c}",
                stats.mean.len()
            )));
        }
        let m = lit::<T>(self.momentum);
        let blend = |slot: &mut Option<Tensor<T>>, batch: &[T]| match slot {
            Some(r) => {
                for (r, &b) in r.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
            None => *slot = Some(Tensor::new([c], batch.to_vec()).expect("channel count checked")),
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundBatchNorm<'t, T> {
        BoundBatchNorm {
            gamma: tape.param(&self.gamma),
            beta: tape.param(&self.beta),
            running: match (&self.running_mean, &self.running_var) {
                (Some(m), Some(v)) => Some((m.data().to_vec(), v.data().to_vec())),
                _ => None,
            },
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundBatchNorm<'t, T: Scalar> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
    running: Option<(Vec<T>, Vec<T>)>,
    epsilon: f64,
}

impl<'t, T: Scalar> BoundBatchNorm<'t, T> {
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        vec![self.gamma, self.beta]
    }
}

/// Memory layout `(outer, C, inner)` with the channel axis third from last.
fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 3 || shape[shape.len() - 3] != channels {
        return Err(Error::shape(format!(
            "batchnorm over {channels} channels got input {shape:?}"
        )));
    }
    let r = shape.len() - 3;
    Ok((shape[..r].iter().product(), shape[r + 1] * shape[r + 2]))
}

struct BatchNorm<T> {
    outer: usize,
    c: usize,
    inner: usize,
    /// Normalized input `x̂`.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used, so `x̂` depends on every element of its
    /// channel.
    train: bool,
}

impl<T: Scalar> BatchNorm<T> {
    fn channel_blocks(&self, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.outer).map(move |o| {
            let start = (o * self.c + ch) * self.inner;
            start..start + self.inner
        })
    }
}

impl<T: Scalar> Function<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let gamma = ctx.input(1).data();
        let count = lit::<T>((self.outer * self.inner) as f64);
        let mut gx = vec![T::zero(); grad.len()];
        let mut gg = vec![T::zero(); self.c];
        let mut gb = vec![T::zero(); self.c];
        for ch in 0..self.c {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for r in self.channel_blocks(ch) {
                sg += crate::scalar::sum_slice(&grad[r.clone()]);
                sgx += crate::scalar::dot(&grad[r.clone()], &self.xhat[r]);
            }
            gb[ch] = sg;
            gg[ch] = sgx;
            let k = gamma[ch] * self.inv_std[ch];
            for r in self.channel_blocks(ch) {
                for i in r {
                    gx[i] = if self.train {
                        k * (grad[i] - (sg + self.xhat[i] * sgx) / count)
                    } else {
                        k * grad[i]
                    };
                }
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }
}

/// Normalizes `x` per channel, then applies `γ`, `β`.
///
/// Train mode uses and returns the batch statistics; the caller folds them
/// into the running averages with [`BatchNormParams::update_running`].
pub fn batchnorm<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &BoundBatchNorm<'t, T>,
    mode: Mode,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let eps = lit::<T>(p.epsilon);
    let (out, func, stats) = {
        let xv = x.value();
        let (gamma, beta) = (p.gamma.value(), p.beta.value());
        let c = gamma.numel();
        let (outer, inner) = layout(xv.shape(), c)?;
        let data = xv.data();
        let block = |o: usize, ch: usize| {
            let start = (o * c + ch) * inner;
            &data[start..start + inner]
        };
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let count = outer * inner;
                if count < 2 {
                    return Err(Error::invalid(
                        "batchnorm training needs more than one value per channel",
                    ));
                }
                let count = lit::<T>(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let s: T = (0..outer)
                        .map(|o| crate::scalar::sum_slice(block(o, ch)))
                        .sum();
                    let mu = s / count;
                    let ss: T = (0..outer)
                        .map(|o| block(o, ch).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                        .sum();
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Infer => {
                let Some((m, v)) = &p.running else {
                    return Err(Error::invalid(
                        "batchnorm inference before running statistics exist",
                    ));
                };
                (m.clone(), v.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for ch in 0..c {
                let start = (o * c + ch) * inner;
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                for i in start..start + inner {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let func = BatchNorm {
            outer,
            c,
            inner,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        (Tensor::new(xv.shape().to_vec(), out)?, func, stats)
    };
    let y = x.tape().record(&[x, p.gamma, p.beta], out, func)?;
    Ok((y, stats))
}
