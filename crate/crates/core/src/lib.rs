//! Next-frame video prediction with stacked ConvLSTM blocks and residual
//! spatial self-attention.

// `!(x > 0.0)` is used on purpose so NaN settings are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
