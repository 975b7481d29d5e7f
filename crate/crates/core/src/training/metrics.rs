//! Per-pixel evaluation metrics.

use serde::{Deserialize, Serialize};

use super::loss::LOG_EPS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Per-pixel binary cross-entropy, mean squared error and binarized accuracy
/// at threshold 0.5, where a value counts as "on" only when strictly above
/// 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bce: f64,
    pub mse: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn compute<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        let mut acc = MetricsAccumulator::default();
        acc.add(pred, target)?;
        acc.finish()
    }
}

/// Running sums over any number of batches, finished in `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    bce: f64,
    sq: f64,
    correct: u64,
    count: u64,
}

impl MetricsAccumulator {
    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} and target {:?} differ",
                pred.shape(),
                target.shape()
            )));
        }
        for (&p, &y) in pred.data().iter().zip(target.data()) {
            let (p, y) = (
                p.to_f64().unwrap_or(f64::NAN),
                y.to_f64().unwrap_or(f64::NAN),
            );
            if !p.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite("metric inputs".into()));
            }
            let pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
            self.bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            self.sq += (p - y) * (p - y);
            self.correct += u64::from((p > 0.5) == (y > 0.5));
        }
        self.count += pred.numel() as u64;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::invalid("no pixels to evaluate"));
        }
        let n = self.count as f64;
        Ok(Metrics {
            bce: (self.bce / n).max(0.0),
            mse: self.sq / n,
            accuracy: self.correct as f64 / n,
        })
    }
}
