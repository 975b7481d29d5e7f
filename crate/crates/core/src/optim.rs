//! Parameter update rules.
//!
//! Both optimizers validate every gradient (present, right shape, finite)
//! before touching any parameter, so a rejected step leaves the model and the
//! optimizer state unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::lit;
use crate::tensor::Tensor;
use crate::Scalar;

fn validate<T: Scalar>(
    params: &[(String, &mut Tensor<T>)],
    grads: &[Option<Tensor<T>>],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    Ok(())
}

/// `θ ← θ − η·g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub eta: f64,
}

impl Sgd {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {eta}"
            )));
        }
        Ok(Self { eta })
    }

    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        validate(params, grads)?;
        let eta = lit::<T>(self.eta);
        for ((_, p), g) in params.iter_mut().zip(grads) {
            let g = g.as_ref().expect("validated");
            for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= eta * d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    /// First and second moments, one per parameter; empty before the first
    /// step.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = config;
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(alpha.is_finite() && alpha >= 0.0) || !unit(beta1) || !unit(beta2) || !(epsilon > 0.0)
        {
            return Err(Error::invalid(format!("invalid Adam settings {config:?}")));
        }
        Ok(Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        validate(params, grads)?;
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, (_, p))| m.shape() != p.shape())
        {
            return Err(Error::shape("Adam state does not match the parameter set"));
        }

        self.t += 1;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
        let (alpha, eps) = (lit::<T>(alpha), lit::<T>(epsilon));
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref().expect("validated").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Bias-corrected first moment of parameter `i` after the last step.
    pub fn m_hat(&self, i: usize) -> Option<Tensor<T>> {
        let c1 = T::one() - lit::<T>(self.config.beta1).powi(self.t as i32);
        self.m.get(i).map(|m| m.map(|x| x / c1))
    }

    /// Bias-corrected second moment of parameter `i` after the last step.
    pub fn v_hat(&self, i: usize) -> Option<Tensor<T>> {
        let c2 = T::one() - lit::<T>(self.config.beta2).powi(self.t as i32);
        self.v.get(i).map(|v| v.map(|x| x / c2))
    }
}

/// Which optimizer a run uses, with its settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        eta: f64,
    },
    Adam {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_alpha() -> f64 {
    AdamConfig::default().alpha
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_epsilon() -> f64 {
    AdamConfig::default().epsilon
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = AdamConfig::default();
        OptimizerConfig::Adam {
            alpha,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// A constructed optimizer of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T: Scalar> {
    Sgd(Sgd),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        Ok(match config {
            OptimizerConfig::Sgd { eta } => Optimizer::Sgd(Sgd::new(eta)?),
            OptimizerConfig::Adam {
                alpha,
                beta1,
                beta2,
                epsilon,
            } => Optimizer::Adam(Adam::new(AdamConfig {
                alpha,
                beta1,
                beta2,
                epsilon,
            })?),
        })
    }

    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(params, grads),
            Optimizer::Adam(a) => a.step(params, grads),
        }
    }

    /// Checks that `grads` could be applied, without applying them.
    pub fn validate(
        params: &[(String, &mut Tensor<T>)],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        validate(params, grads)
    }
}
