use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::glorot_uniform;
use crate::tensor::Tensor;
use crate::Scalar;

/// Output channels of the three strided 3-D convolutions.
pub const INSTRUCTOR_FILTERS: [usize; 3] = [8, 16, 32];
const LEAK: f64 = 0.2;

/// Sequence discriminator: three `3×3×3` convolutions with spatial stride 2
/// and leaky ReLU, global average pooling, then one sigmoid unit.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructorModel<T: Scalar> {
    /// `(kernel (O, C, 3, 3, 3), bias (O))` per layer.
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    /// `(32, 1)`.
    pub dense_w: Tensor<T>,
    /// `(1)`.
    pub dense_b: Tensor<T>,
}

impl<T: Scalar> InstructorModel<T> {
    pub fn build(rng: &mut impl Rng) -> Self {
        let mut c_in = 1;
        let mut convs = Vec::new();
        for f in INSTRUCTOR_FILTERS {
            let k = glorot_uniform(&[f, c_in, 3, 3, 3], rng);
            convs.push((k, Tensor::zeros([f]).with_requires_grad()));
            c_in = f;
        }
        Self {
            convs,
            dense_w: glorot_uniform(&[c_in, 1], rng),
            dense_b: Tensor::zeros([1]).with_requires_grad(),
        }
    }

    /// All parameters zero: every score is exactly 0.5.
    pub fn zeros() -> Self {
        let mut m = Self::build(&mut rand::rngs::mock::StepRng::new(0, 0));
        for (_, t) in m.named_params_mut() {
            t.data_mut().fill(T::zero());
        }
        m
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), k));
            out.push((format!("conv{i}.bias"), b));
        }
        out.push(("dense.weight".to_string(), &self.dense_w));
        out.push(("dense.bias".to_string(), &self.dense_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), k));
            out.push((format!("conv{i}.bias"), b));
        }
        out.push(("dense.weight".to_string(), &mut self.dense_w));
        out.push(("dense.bias".to_string(), &mut self.dense_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scores `(B, T, 1, H, W)` sequences, returning `(B)` values in `(0, 1)`
    /// and the parameter handles in [`named_params`](Self::named_params)
    /// order.
    pub fn score_on_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        seq: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        self.score_impl(tape, seq, false)
    }

    /// Like [`score_on_tape`](Self::score_on_tape) with the parameters
    /// recorded as constants, so gradients reach `seq` only.
    pub fn score_frozen<'t>(&self, tape: &'t Tape<T>, seq: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.score_impl(tape, seq, true)?.0)
    }

    fn score_impl<'t>(
        &self,
        tape: &'t Tape<T>,
        seq: Var<'t, T>,
        frozen: bool,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let bind = |t: &Tensor<T>| {
            if frozen {
                tape.constant(t.clone())
            } else {
                tape.param(t)
            }
        };
        let shape = seq.shape();
        if shape.len() != 5 || shape[2] != 1 {
            return Err(Error::shape(format!(
                "instructor expects (B, T, 1, H, W), got {shape:?}"
            )));
        }
        let batch = shape[0];
        let mut params = Vec::new();
        let mut h = seq.swap01()?;
        for (k, b) in &self.convs {
            let (k, b) = (bind(k), bind(b));
            params.extend([k, b]);
            h = h
                .conv3d(k, Some(b), [1, 2, 2], [1, 1, 1])?
                .leaky_relu(crate::scalar::lit(LEAK))?;
        }
        // (T', B, C, H', W') -> (B, C)
        let pooled = h.swap01()?.mean_axes(&[1, 3, 4])?;
        let (w, b) = (bind(&self.dense_w), bind(&self.dense_b));
        params.extend([w, b]);
        let score = pooled.matmul(w)?.add(b)?.reshape(&[batch])?.sigmoid()?;
        Ok((score, params))
    }

    pub fn score(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let (s, _) = self.score_on_tape(&tape, tape.constant(seq.clone()))?;
        let value = s.value().clone();
        Ok(value)
    }
}
