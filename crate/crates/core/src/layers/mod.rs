//! Network building blocks: ConvLSTM, batch normalization, residual spatial
//! self-attention, the Conv3D output head and rotation augmentation.

pub mod attention;
pub mod batchnorm;
pub mod convlstm;
pub mod head;
pub mod rotation;

use rand::Rng;

use crate::tensor::Tensor;
use crate::Scalar;

pub use attention::{attention_weights, self_attention, AttentionParams, BoundAttention};
pub use batchnorm::{batchnorm, BatchNormParams, BatchStats, BoundBatchNorm};
pub use convlstm::{
    convlstm_sequence, convlstm_step, BoundConvLstm, ConvLstmParams, ConvLstmState,
};
pub use head::{conv3d_head, HeadParams};
pub use rotation::{draw_angle, random_rotation, rotate_batch, rotate_frame, RotationMap};

/// Whether a forward pass is part of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Glorot-uniform kernel for a conv/dense weight laid out as
/// `(out, in, spatial...)`.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -limit, limit, rng).with_requires_grad()
}

pub(crate) fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec()).with_requires_grad()
}
