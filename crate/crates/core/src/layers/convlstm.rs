//! Convolutional LSTM cell without peepholes.
//!
//! ```text
//! i  = σ(W_xi * x + W_hi * h + b_i)
//! f  = σ(W_xf * x + W_hf * h + b_f)
//! g  = tanh(W_xc * x + W_hc * h + b_c)
//! o  = σ(W_xo * x + W_ho * h + b_o)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```
//!
//! All convolutions use `same` padding.

use rand::Rng;

use super::{glorot_uniform, zeros_param};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams<T: Scalar> {
    pub w_xi: Tensor<T>,
    pub w_xf: Tensor<T>,
    pub w_xc: Tensor<T>,
    pub w_xo: Tensor<T>,
    pub w_hi: Tensor<T>,
    pub w_hf: Tensor<T>,
    pub w_hc: Tensor<T>,
    pub w_ho: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_o: Tensor<T>,
}

const NAMES: [&str; 12] = [
    "w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho", "b_i", "b_f", "b_c", "b_o",
];

impl<T: Scalar> ConvLstmParams<T> {
    pub fn zeros(c_in: usize, filters: usize, kernel: usize) -> Self {
        let wx = [filters, c_in, kernel, kernel];
        let wh = [filters, filters, kernel, kernel];
        Self {
            w_xi: zeros_param(&wx),
            w_xf: zeros_param(&wx),
            w_xc: zeros_param(&wx),
            w_xo: zeros_param(&wx),
            w_hi: zeros_param(&wh),
            w_hf: zeros_param(&wh),
            w_hc: zeros_param(&wh),
            w_ho: zeros_param(&wh),
            b_i: zeros_param(&[filters]),
            b_f: zeros_param(&[filters]),
            b_c: zeros_param(&[filters]),
            b_o: zeros_param(&[filters]),
        }
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn glorot(c_in: usize, filters: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let wx = [filters, c_in, kernel, kernel];
        let wh = [filters, filters, kernel, kernel];
        let mut p = Self::zeros(c_in, filters, kernel);
        p.w_xi = glorot_uniform(&wx, rng);
        p.w_xf = glorot_uniform(&wx, rng);
        p.w_xc = glorot_uniform(&wx, rng);
        p.w_xo = glorot_uniform(&wx, rng);
        p.w_hi = glorot_uniform(&wh, rng);
        p.w_hf = glorot_uniform(&wh, rng);
        p.w_hc = glorot_uniform(&wh, rng);
        p.w_ho = glorot_uniform(&wh, rng);
        p
    }

    pub fn filters(&self) -> usize {
        self.b_i.numel()
    }

    pub fn c_in(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w_xi.shape()[2]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let all = [
            &self.w_xi, &self.w_xf, &self.w_xc, &self.w_xo, &self.w_hi, &self.w_hf, &self.w_hc,
            &self.w_ho, &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ];
        NAMES.into_iter().zip(all).collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let all = [
            &mut self.w_xi,
            &mut self.w_xf,
            &mut self.w_xc,
            &mut self.w_xo,
            &mut self.w_hi,
            &mut self.w_hf,
            &mut self.w_hc,
            &mut self.w_ho,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
        ];
        NAMES.into_iter().zip(all).collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundConvLstm<'t, T> {
        BoundConvLstm {
            w_xi: tape.param(&self.w_xi),
            w_xf: tape.param(&self.w_xf),
            w_xc: tape.param(&self.w_xc),
            w_xo: tape.param(&self.w_xo),
            w_hi: tape.param(&self.w_hi),
            w_hf: tape.param(&self.w_hf),
            w_hc: tape.param(&self.w_hc),
            w_ho: tape.param(&self.w_ho),
            b_i: tape.param(&self.b_i),
            b_f: tape.param(&self.b_f),
            b_c: tape.param(&self.b_c),
            b_o: tape.param(&self.b_o),
        }
    }
}

/// [`ConvLstmParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundConvLstm<'t, T: Scalar> {
    pub w_xi: Var<'t, T>,
    pub w_xf: Var<'t, T>,
    pub w_xc: Var<'t, T>,
    pub w_xo: Var<'t, T>,
    pub w_hi: Var<'t, T>,
    pub w_hf: Var<'t, T>,
    pub w_hc: Var<'t, T>,
    pub w_ho: Var<'t, T>,
    pub b_i: Var<'t, T>,
    pub b_f: Var<'t, T>,
    pub b_c: Var<'t, T>,
    pub b_o: Var<'t, T>,
}

impl<'t, T: Scalar> BoundConvLstm<'t, T> {
    /// Same order as [`ConvLstmParams::named_params`].
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        vec![
            self.w_xi, self.w_xf, self.w_xc, self.w_xo, self.w_hi, self.w_hf, self.w_hc, self.w_ho,
            self.b_i, self.b_f, self.b_c, self.b_o,
        ]
    }

    fn filters(&self) -> usize {
        self.b_i.shape()[0]
    }
}

/// Hidden and cell feature maps carried between time steps.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmState<'t, T: Scalar> {
    pub h: Var<'t, T>,
    pub c: Var<'t, T>,
}

impl<'t, T: Scalar> ConvLstmState<'t, T> {
    /// Zero state with shape `lead + (filters, H, W)`.
    pub fn zeros(tape: &'t Tape<T>, shape: &[usize]) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(shape.to_vec())),
            c: tape.constant(Tensor::zeros(shape.to_vec())),
        }
    }
}

/// The four gates' kernels and biases concatenated along the output channel
/// axis, in `i, f, c, o` order, so each step runs one convolution per input.
struct Fused<'t, T: Scalar> {
    wx: Var<'t, T>,
    wh: Var<'t, T>,
    b: Var<'t, T>,
    filters: usize,
}

impl<'t, T: Scalar> Fused<'t, T> {
    fn new(p: &BoundConvLstm<'t, T>) -> Result<Self> {
        let cat = |ws: [Var<'t, T>; 4]| -> Result<Var<'t, T>> {
            let mut shape = ws[0].shape();
            shape[0] *= 4;
            Var::stack0(&ws)?.reshape(&shape)
        };
        Ok(Self {
            wx: cat([p.w_xi, p.w_xf, p.w_xc, p.w_xo])?,
            wh: cat([p.w_hi, p.w_hf, p.w_hc, p.w_ho])?,
            b: cat([p.b_i, p.b_f, p.b_c, p.b_o])?,
            filters: p.filters(),
        })
    }

    /// Gate update from the input contribution `zx = W_x * x + b` of shape
    /// `(B, 4F, H, W)` and the previous state.
    fn step(&self, zx: Var<'t, T>, state: &ConvLstmState<'t, T>) -> Result<ConvLstmState<'t, T>> {
        let s = zx.shape();
        let (batch, f, area) = (s[0], self.filters, s[2] * s[3]);
        let z = zx.add(state.h.conv2d(self.wh, None, Padding::Same)?)?;
        let gates = z.reshape(&[batch, 4, f * area])?.swap01()?;
        let gate = |k: usize| gates.slice0(k, 1)?.reshape(&[batch, f, s[2], s[3]]);
        let i = gate(0)?.sigmoid()?;
        let fg = gate(1)?.sigmoid()?;
        let g = gate(2)?.tanh()?;
        let o = gate(3)?.sigmoid()?;
        let c = fg.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh()?)?;
        Ok(ConvLstmState { h, c })
    }
}

fn check_state<T: Scalar>(
    xs: &[usize],
    state: &ConvLstmState<'_, T>,
    filters: usize,
) -> Result<()> {
    let hs = state.h.shape();
    if xs.len() != hs.len()
        || xs.len() < 3
        || xs[xs.len() - 2..] != hs[hs.len() - 2..]
        || xs[..xs.len() - 3] != hs[..hs.len() - 3]
    {
        return Err(Error::shape(format!(
            "convlstm input {xs:?} does not match state {hs:?}"
        )));
    }
    if state.c.shape() != hs || hs[hs.len() - 3] != filters {
        return Err(Error::shape(format!(
            "convlstm state {hs:?} / {:?} for {filters} filters",
            state.c.shape(),
        )));
    }
    Ok(())
}

/// `(C, H, W)` handles viewed as a batch of one.
fn batched<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = v.shape();
    if s.len() == 3 {
        v.reshape(&[1, s[0], s[1], s[2]])
    } else {
        Ok(v)
    }
}

/// One recurrent step on `(C_in, H, W)` or `(B, C_in, H, W)` input.
pub fn convlstm_step<'t, T: Scalar>(
    x: Var<'t, T>,
    state: &ConvLstmState<'t, T>,
    p: &BoundConvLstm<'t, T>,
) -> Result<ConvLstmState<'t, T>> {
    let xs = x.shape();
    check_state(&xs, state, p.filters())?;
    let fused = Fused::new(p)?;
    let st = ConvLstmState {
        h: batched(state.h)?,
        c: batched(state.c)?,
    };
    let zx = batched(x)?.conv2d(fused.wx, Some(fused.b), Padding::Same)?;
    let next = fused.step(zx, &st)?;
    let hs = state.h.shape();
    Ok(ConvLstmState {
        h: next.h.reshape(&hs)?,
        c: next.c.reshape(&hs)?,
    })
}

/// Runs the cell over the leading (time) axis of `(T, [B,] C_in, H, W)` from a
/// zero state and stacks the hidden state of every step.
pub fn convlstm_sequence<'t, T: Scalar>(
    xs: Var<'t, T>,
    p: &BoundConvLstm<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = xs.shape();
    if shape.len() != 4 && shape.len() != 5 {
        return Err(Error::shape(format!("convlstm sequence input {shape:?}")));
    }
    let steps = shape[0];
    if steps == 0 {
        return Err(Error::invalid("convlstm sequence needs at least one step"));
    }
    let [c_in, h, w] = shape[shape.len() - 3..] else {
        unreachable!()
    };
    let batch = if shape.len() == 5 { shape[1] } else { 1 };
    let f = p.filters();
    let fused = Fused::new(p)?;
    // the input path does not depend on the recurrence: one convolution
    // covers every step
    let zx = xs
        .reshape(&[steps * batch, c_in, h, w])?
        .conv2d(fused.wx, Some(fused.b), Padding::Same)?
        .reshape(&[steps, batch, 4 * f, h, w])?;
    let mut state = ConvLstmState::zeros(xs.tape(), &[batch, f, h, w]);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        state = fused.step(zx.slice0(t, 1)?.reshape(&[batch, 4 * f, h, w])?, &state)?;
        outputs.push(state.h);
    }
    let mut out_shape = shape.clone();
    out_shape[shape.len() - 3] = f;
    Var::stack0(&outputs)?.reshape(&out_shape)
}
