//! Single-head residual self-attention over the spatial positions of a
//! feature map.
//!
//! For one `(C, H, W)` slab viewed as `X: (C, N)` with `N = H·W`:
//!
//! ```text
//! Q = W_q X,  K = W_k X,  V = W_v X          (1×1 convolutions, no bias)
//! S = Qᵀ K / √C                               (N × N)
//! A = softmax over each row of S
//! result = X + V Aᵀ
//! ```
//!
//! Leading axes (time, batch) are independent slabs. The op is fused so the
//! `N × N` matrices are produced a tile of rows at a time and never stored;
//! backward recomputes them.

use rand::Rng;

use super::glorot_uniform;
use crate::autodiff::ops::softmax_row;
use crate::autodiff::{BackwardContext, Function, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm_nt_acc, gemm_rows_acc, lit};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Treat `A` as a constant in backward: no gradient reaches `W_q`, `W_k`
    /// or the input through the score path.
    pub stop_qk_gradient: bool,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn glorot(channels: usize, rng: &mut impl Rng) -> Self {
        let shape = [channels, channels, 1, 1];
        Self {
            w_q: glorot_uniform(&shape, rng),
            w_k: glorot_uniform(&shape, rng),
            w_v: glorot_uniform(&shape, rng),
            stop_qk_gradient: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundAttention<'t, T> {
        BoundAttention {
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            stop_qk_gradient: self.stop_qk_gradient,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention<'t, T: Scalar> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub stop_qk_gradient: bool,
}

impl<'t, T: Scalar> BoundAttention<'t, T> {
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        vec![self.w_q, self.w_k, self.w_v]
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    slabs: usize,
    c: usize,
    n: usize,
}

impl Geom {
    fn of(x: &[usize], weights: [&[usize]; 3]) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::shape(format!(
                "attention input {x:?} needs (.., C, H, W)"
            )));
        }
        let r = x.len() - 3;
        let c = x[r];
        for w in weights {
            if w != [c, c, 1, 1] {
                return Err(Error::shape(format!(
                    "attention projection {w:?} does not map {c} channels to {c}"
                )));
            }
        }
        Ok(Self {
            slabs: x[..r].iter().product(),
            c,
            n: x[r + 1] * x[r + 2],
        })
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / lit::<T>(self.c as f64).sqrt()
    }
}

/// Query rows handled together, so that a tile of `S`/`A` stays in cache
/// between the score product, the softmax and the value product.
const TILE: usize = 32;

/// `dst = W · X` for a `(C, C)` weight and `(C, N)` slab.
fn project<T: Scalar>(g: Geom, w: &[T], x: &[T], dst: &mut [T]) {
    T::gemm(
        g.c,
        g.c,
        g.n,
        T::one(),
        w,
        (g.c, 1),
        x,
        (g.n, 1),
        T::zero(),
        dst,
        (g.n, 1),
    );
}

fn tiles(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(TILE).map(move |i0| (i0, TILE.min(n - i0)))
}

/// Rows `i0..i0 + r` of `A = softmax(Qᵀ K / √C)` for one slab, written
/// row-major into `at`.
fn attention_rows<T: Scalar>(g: Geom, q: &[T], k: &[T], i0: usize, r: usize, at: &mut [T]) {
    let n = g.n;
    at.fill(T::zero());
    gemm_rows_acc(r, g.c, n, g.scale(), &q[i0..], (1, n), k, at, n);
    for row in at.chunks_mut(n) {
        softmax_row(row);
    }
}

/// Runs `f(slab, v, i0, rows of A)` over every row tile of every slab.
fn for_each_tile<T: Scalar>(
    g: Geom,
    x: &[T],
    [wq, wk, wv]: [&[T]; 3],
    mut f: impl FnMut(usize, &[T], usize, &[T]),
) {
    let (c, n) = (g.c, g.n);
    let mut q = vec![T::zero(); c * n];
    let mut k = vec![T::zero(); c * n];
    let mut v = vec![T::zero(); c * n];
    let mut tile = vec![T::zero(); TILE.min(n) * n];
    for s in 0..g.slabs {
        let xs = &x[s * c * n..(s + 1) * c * n];
        project(g, wq, xs, &mut q);
        project(g, wk, xs, &mut k);
        project(g, wv, xs, &mut v);
        for (i0, r) in tiles(n) {
            let at = &mut tile[..r * n];
            attention_rows(g, &q, &k, i0, r, at);
            f(s, &v, i0, at);
        }
    }
}

/// `X + V Aᵀ` for every slab.
fn forward<T: Scalar>(g: Geom, x: &[T], w: [&[T]; 3]) -> Vec<T> {
    let (c, n) = (g.c, g.n);
    let mut out = x.to_vec();
    for_each_tile(g, x, w, |s, v, i0, at| {
        let r = at.len() / n;
        let o = &mut out[s * c * n..(s + 1) * c * n];
        gemm_nt_acc(c, r, n, v, at, &mut o[i0..], n);
    });
    out
}

/// Keeps no `N × N` state: backward recomputes `A` one tile at a time.
struct SelfAttention {
    geom: Geom,
    stop_qk: bool,
}

impl<T: Scalar> Function<T> for SelfAttention {
    fn name(&self) -> &'static str {
        "self_attention"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let (c, n) = (g.c, g.n);
        let x = ctx.input(0).data();
        let wq = ctx.input(1).data();
        let wk = ctx.input(2).data();
        let wv = ctx.input(3).data();
        let score_path =
            !self.stop_qk && (ctx.needs_grad(0) || ctx.needs_grad(1) || ctx.needs_grad(2));

        let mut gx = grad.to_vec();
        let mut gwq = vec![T::zero(); c * c];
        let mut gwk = vec![T::zero(); c * c];
        let mut gwv = vec![T::zero(); c * c];
        let mut q = vec![T::zero(); c * n];
        let mut k = vec![T::zero(); c * n];
        let mut v = vec![T::zero(); c * n];
        let mut dv = vec![T::zero(); c * n];
        let mut dq = vec![T::zero(); c * n];
        let mut dk = vec![T::zero(); c * n];
        let mut at = vec![T::zero(); TILE.min(n) * n];
        let mut ds = vec![T::zero(); TILE.min(n) * n];
        let scale = g.scale::<T>();

        for s in 0..g.slabs {
            let xs = &x[s * c * n..(s + 1) * c * n];
            let gs = &grad[s * c * n..(s + 1) * c * n];
            let gxs = &mut gx[s * c * n..(s + 1) * c * n];
            project(g, wq, xs, &mut q);
            project(g, wk, xs, &mut k);
            project(g, wv, xs, &mut v);
            dv.fill(T::zero());
            dq.fill(T::zero());
            dk.fill(T::zero());
            for (i0, r) in tiles(n) {
                let at = &mut at[..r * n];
                attention_rows(g, &q, &k, i0, r, at);
                // dV += G[:, rows] A[rows]
                gemm_rows_acc(c, r, n, T::one(), &gs[i0..], (n, 1), at, &mut dv, n);
                if !score_path {
                    continue;
                }
                let dst = &mut ds[..r * n];
                // dA = Gᵀ V on these rows, then the softmax Jacobian row by row
                dst.fill(T::zero());
                gemm_rows_acc(r, c, n, T::one(), &gs[i0..], (1, n), &v, dst, n);
                for (drow, arow) in dst.chunks_mut(n).zip(at.chunks(n)) {
                    let dotp = crate::scalar::dot(drow, arow);
                    for (d, &p) in drow.iter_mut().zip(arow) {
                        *d = p * (*d - dotp) * scale;
                    }
                }
                // dQ[:, rows] = K dSᵀ, dK += Q[:, rows] dS
                gemm_nt_acc(c, r, n, &k, dst, &mut dq[i0..], n);
                gemm_rows_acc(c, r, n, T::one(), &q[i0..], (n, 1), dst, &mut dk, n);
            }
            T::gemm(
                c,
                n,
                c,
                T::one(),
                &dv,
                (n, 1),
                xs,
                (1, n),
                T::one(),
                &mut gwv,
                (c, 1),
            );
            T::gemm(
                c,
                c,
                n,
                T::one(),
                wv,
                (1, c),
                &dv,
                (n, 1),
                T::one(),
                gxs,
                (n, 1),
            );
            if score_path {
                T::gemm(
                    c,
                    n,
                    c,
                    T::one(),
                    &dq,
                    (n, 1),
                    xs,
                    (1, n),
                    T::one(),
                    &mut gwq,
                    (c, 1),
                );
                T::gemm(
                    c,
                    n,
                    c,
                    T::one(),
                    &dk,
                    (n, 1),
                    xs,
                    (1, n),
                    T::one(),
                    &mut gwk,
                    (c, 1),
                );
                T::gemm(
                    c,
                    c,
                    n,
                    T::one(),
                    wq,
                    (1, c),
                    &dq,
                    (n, 1),
                    T::one(),
                    gxs,
                    (n, 1),
                );
                T::gemm(
                    c,
                    c,
                    n,
                    T::one(),
                    wk,
                    (1, c),
                    &dk,
                    (n, 1),
                    T::one(),
                    gxs,
                    (n, 1),
                );
            }
        }
        vec![Some(gx), Some(gwq), Some(gwk), Some(gwv)]
    }
}

/// Residual self-attention on `(.., C, H, W)` input; output has the input's
/// shape.
pub fn self_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &BoundAttention<'t, T>,
) -> Result<Var<'t, T>> {
    let (out, func) = {
        let xv = x.value();
        let (wq, wk, wv) = (p.w_q.value(), p.w_k.value(), p.w_v.value());
        let geom = Geom::of(xv.shape(), [wq.shape(), wk.shape(), wv.shape()])?;
        let out = forward(geom, xv.data(), [wq.data(), wk.data(), wv.data()]);
        let func = SelfAttention {
            geom,
            stop_qk: p.stop_qk_gradient,
        };
        (Tensor::new(xv.shape().to_vec(), out)?, func)
    };
    x.tape().record(&[x, p.w_q, p.w_k, p.w_v], out, func)
}

/// The attention matrices `A` for `(.., C, H, W)` input, shaped
/// `(.., N, N)`.
pub fn attention_weights<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    let geom = Geom::of(x.shape(), [p.w_q.shape(), p.w_k.shape(), p.w_v.shape()])?;
    let n = geom.n;
    let mut attn = vec![T::zero(); geom.slabs * n * n];
    let w = [p.w_q.data(), p.w_k.data(), p.w_v.data()];
    for_each_tile(geom, x.data(), w, |s, _, i0, at| {
        let base = s * n * n + i0 * n;
        attn[base..base + at.len()].copy_from_slice(at);
    });
    let mut shape = x.shape()[..x.ndim() - 3].to_vec();
    shape.extend([n, n]);
    Tensor::new(shape, attn)
}
