//! Output head: a 3×3×3 `same` convolution to one channel, then a sigmoid.

use rand::Rng;

use super::{glorot_uniform, zeros_param};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar> {
    /// `(1, C, 3, 3, 3)`.
    pub kernel: Tensor<T>,
    /// `(1)`.
    pub bias: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn glorot(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: glorot_uniform(&[1, channels, 3, 3, 3], rng),
            bias: zeros_param(&[1]),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            kernel: zeros_param(&[1, channels, 3, 3, 3]),
            bias: zeros_param(&[1]),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("kernel", &self.kernel), ("bias", &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> (Var<'t, T>, Var<'t, T>) {
        (tape.param(&self.kernel), tape.param(&self.bias))
    }
}

/// `σ(conv3d(x))` over `(T, B, C, H, W)` with zero padding 1 on every axis,
/// producing `(T, B, 1, H, W)`.
pub fn conv3d_head<'t, T: Scalar>(
    x: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ks = kernel.shape();
    if ks.len() != 5 || ks[0] != 1 || ks[2..] != [3, 3, 3] {
        return Err(Error::shape(format!(
            "head kernel {ks:?}, expected (1, C, 3, 3, 3)"
        )));
    }
    x.conv3d(kernel, Some(bias), [1, 1, 1], [1, 1, 1])?
        .sigmoid()
}
