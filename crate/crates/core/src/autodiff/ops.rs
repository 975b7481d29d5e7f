//! Elementwise, reduction, shape and softmax operations.

use super::{BackwardContext, Function, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Broadcast shape under the trailing-dimension rule: the lower-rank operand
/// must equal a suffix of the other.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

struct Binary {
    kind: BinaryKind,
}

impl<T: Scalar> Function<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let a = ctx.input(0).data();
        let b = ctx.input(1).data();
        let (da, db) = match self.kind {
            BinaryKind::Add => (
                ctx.needs_grad(0).then(|| grad.to_vec()),
                ctx.needs_grad(1).then(|| grad.to_vec()),
            ),
            BinaryKind::Sub => (
                ctx.needs_grad(0).then(|| grad.to_vec()),
                ctx.needs_grad(1)
                    .then(|| grad.iter().map(|&g| -g).collect()),
            ),
            BinaryKind::Mul => (
                ctx.needs_grad(0)
                    .then(|| zip_broadcast(grad, b, |g, y| g * y)),
                ctx.needs_grad(1)
                    .then(|| zip_broadcast(grad, a, |g, x| g * x)),
            ),
        };
        vec![
            da.map(|d| fold_to(d, a.len())),
            db.map(|d| fold_to(d, b.len())),
        ]
    }
}

/// Elementwise `f` where the shorter operand repeats along the longer one.
fn zip_broadcast<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = a.len().max(b.len());
    let m = a.len().min(b.len());
    if m == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    for (ca, cb) in a.chunks(m).cycle().zip(b.chunks(m).cycle()).take(n / m) {
        out.extend(ca.iter().zip(cb).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Sums a broadcast gradient back onto an operand of `len` elements.
fn fold_to<T: Scalar>(full: Vec<T>, len: usize) -> Vec<T> {
    if full.len() == len {
        return full;
    }
    let mut acc = vec![T::zero(); len];
    for c in full.chunks(len) {
        acc.iter_mut().zip(c).for_each(|(a, &g)| *a += g);
    }
    acc
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind<T> {
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Scale(T),
    AddScalar(T),
    LeakyRelu(T),
    Clamp(T, T),
    Square,
}

struct Unary<T> {
    kind: UnaryKind<T>,
}

impl<T: Scalar> Unary<T> {
    fn apply(&self, x: T) -> T {
        match self.kind {
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Scale(s) => x * s,
            UnaryKind::AddScalar(s) => x + s,
            UnaryKind::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * slope
                }
            }
            UnaryKind::Clamp(lo, hi) => x.max(lo).min(hi),
            UnaryKind::Square => x * x,
        }
    }
}

impl<T: Scalar> Function<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Log => "log",
            UnaryKind::Exp => "exp",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Clamp(..) => "clamp",
            UnaryKind::Square => "square",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.input(0).data();
        let y = ctx.output().data();
        let one = T::one();
        let g = grad
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let d = match self.kind {
                    UnaryKind::Sigmoid => y[i] * (one - y[i]),
                    UnaryKind::Tanh => one - y[i] * y[i],
                    UnaryKind::Log => one / x[i],
                    UnaryKind::Exp => y[i],
                    UnaryKind::Scale(s) => s,
                    UnaryKind::AddScalar(_) => one,
                    UnaryKind::LeakyRelu(slope) => {
                        if x[i] > T::zero() {
                            one
                        } else {
                            slope
                        }
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        if x[i] >= lo && x[i] <= hi {
                            one
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Square => lit::<T>(2.0) * x[i],
                };
                g * d
            })
            .collect();
        vec![Some(g)]
    }
}

struct SumAll;

impl<T: Scalar> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; ctx.input(0).numel()])]
    }
}

/// Sum over a set of axes; the reduced axes are removed from the shape.
struct SumAxes {
    in_shape: Vec<usize>,
    axes: Vec<usize>,
}

impl SumAxes {
    /// Maps a flat input index to the flat output index.
    fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        let mut stride = 1;
        for d in (0..self.in_shape.len()).rev() {
            let n = self.in_shape[d];
            let i = flat % n;
            flat /= n;
            if !self.axes.contains(&d) {
                out += i * stride;
                stride *= n;
            }
        }
        out
    }
}

impl<T: Scalar> Function<T> for SumAxes {
    fn name(&self) -> &'static str {
        "sum_axes"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = numel(&self.in_shape);
        vec![Some((0..n).map(|i| grad[self.out_index(i)]).collect())]
    }
}

struct Reshape;

impl<T: Scalar> Function<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Slice0 {
    start: usize,
}

impl<T: Scalar> Function<T> for Slice0 {
    fn name(&self) -> &'static str {
        "slice0"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let input = ctx.input(0);
        let inner = input.numel() / input.shape()[0];
        let mut g = vec![T::zero(); input.numel()];
        let off = self.start * inner;
        g[off..off + grad.len()].copy_from_slice(grad);
        vec![Some(g)]
    }

    fn window(&self, ctx: &BackwardContext<'_, T>) -> Option<usize> {
        let input = ctx.input(0);
        Some(self.start * (input.numel() / input.shape()[0]))
    }
}

struct Stack0;

impl<T: Scalar> Function<T> for Stack0 {
    fn name(&self) -> &'static str {
        "stack0"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let part = ctx.input(0).numel();
        grad.chunks(part).map(|c| Some(c.to_vec())).collect()
    }
}

struct Swap01 {
    a: usize,
    b: usize,
}

impl<T: Scalar> Function<T> for Swap01 {
    fn name(&self) -> &'static str {
        "swap01"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        // output is (b, a, inner); map back to (a, b, inner)
        let inner = grad.len() / (self.a * self.b);
        let mut g = vec![T::zero(); grad.len()];
        for j in 0..self.b {
            for i in 0..self.a {
                let src = (j * self.a + i) * inner;
                let dst = (i * self.b + j) * inner;
                g[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
            }
        }
        vec![Some(g)]
    }
}

/// Layout helper: a tensor viewed as `(outer, axis, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the `axis` of `(outer, axis, inner)` data.
pub(crate) fn softmax_forward<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = data.to_vec();
    if inner == 1 {
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        return out;
    }
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                buf[k] = data[(o * n + k) * inner + i];
            }
            softmax_row(&mut buf);
            for k in 0..n {
                out[(o * n + k) * inner + i] = buf[k];
            }
        }
    }
    out
}

/// In-place softmax of one contiguous row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut lanes = [T::neg_infinity(); 16];
    let chunks = row.chunks_exact(16);
    for &x in chunks.remainder() {
        if x > lanes[0] {
            lanes[0] = x;
        }
    }
    for c in chunks {
        for l in 0..16 {
            if c[l] > lanes[l] {
                lanes[l] = c[l];
            }
        }
    }
    let max = lanes.into_iter().fold(T::neg_infinity(), T::max);
    for x in row.iter_mut() {
        *x -= max;
    }
    T::exp_in_place(row);
    let inv = T::one() / crate::scalar::sum_slice(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

struct Softmax {
    axis: usize,
}

impl<T: Scalar> Function<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let y = ctx.output().data();
        let (outer, n, inner) = axis_split(ctx.output().shape(), self.axis);
        let mut g = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut dotp = T::zero();
                for k in 0..n {
                    dotp += grad[idx(k)] * y[idx(k)];
                }
                for k in 0..n {
                    g[idx(k)] = y[idx(k)] * (grad[idx(k)] - dotp);
                }
            }
        }
        vec![Some(g)]
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Function<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = ctx.input(0).data();
        let b = ctx.input(1).data();
        let ga = ctx.needs_grad(0).then(|| {
            // dA = G · Bᵀ
            let mut ga = vec![T::zero(); m * k];
            T::gemm(
                m,
                n,
                k,
                T::one(),
                grad,
                (n, 1),
                b,
                (1, n),
                T::zero(),
                &mut ga,
                (k, 1),
            );
            ga
        });
        let gb = ctx.needs_grad(1).then(|| {
            // dB = Aᵀ · G
            let mut gb = vec![T::zero(); k * n];
            T::gemm(
                k,
                m,
                n,
                T::one(),
                a,
                (1, k),
                grad,
                (n, 1),
                T::zero(),
                &mut gb,
                (n, 1),
            );
            gb
        });
        vec![ga, gb]
    }
}

// Shape mismatches are errors, so these stay inherent methods rather than operator impls.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let b = other.value();
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let (ad, bd) = (a.data(), b.data());
            let data = match kind {
                BinaryKind::Add => zip_broadcast(ad, bd, |x, y| x + y),
                BinaryKind::Sub => zip_broadcast(ad, bd, |x, y| x - y),
                BinaryKind::Mul => zip_broadcast(ad, bd, |x, y| x * y),
            };
            Tensor::new(shape, data)?
        };
        self.tape.record(&[self, other], out, Binary { kind })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    fn unary(self, kind: UnaryKind<T>) -> Result<Var<'t, T>> {
        let f = Unary { kind };
        let out = {
            let x = self.value();
            let one = T::one();
            let exp_of = |scale: T| {
                let mut e: Vec<T> = x.data().iter().map(|&v| v * scale).collect();
                T::exp_in_place(&mut e);
                e
            };
            let data = match kind {
                UnaryKind::Sigmoid => {
                    let mut e = exp_of(-one);
                    e.iter_mut().for_each(|v| *v = one / (one + *v));
                    e
                }
                // 1 - 2 / (e^{2x} + 1), saturating cleanly at ±1
                UnaryKind::Tanh => {
                    let two = one + one;
                    let mut e = exp_of(two);
                    e.iter_mut().for_each(|v| *v = one - two / (*v + one));
                    e
                }
                UnaryKind::Exp => exp_of(one),
                _ => x.data().iter().map(|&v| f.apply(v)).collect(),
            };
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.record(&[self], out, f)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Tanh)
    }

    /// Natural log. Not clamped: a zero input is a non-finite error.
    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Scale(-T::one()))
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Scale(s))
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::AddScalar(s))
    }

    /// `1 - x`
    pub fn one_minus(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())?.add_scalar(T::one())
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Square)
    }

    pub fn leaky_relu(self, slope: T) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(&[self], out, SumAll)
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?
            .scale(T::one() / T::from_usize(n).expect("count"))
    }

    /// Sums over `axes` (any order, no duplicates) and drops them.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let (out, f) = {
            let v = self.value();
            let shape = v.shape().to_vec();
            let mut axes = axes.to_vec();
            axes.sort_unstable();
            axes.dedup();
            if axes.iter().any(|&a| a >= shape.len()) || axes.len() == shape.len() {
                return Err(Error::shape(format!(
                    "sum_axes({axes:?}) on shape {shape:?}"
                )));
            }
            let out_shape: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &n)| n)
                .collect();
            let f = SumAxes {
                in_shape: shape,
                axes,
            };
            let mut data = vec![T::zero(); numel(&out_shape)];
            for (i, &x) in v.data().iter().enumerate() {
                data[f.out_index(i)] += x;
            }
            (Tensor::new(out_shape, data)?, f)
        };
        self.tape.record(&[self], out, f)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        self.sum_axes(axes)?
            .scale(T::one() / T::from_usize(count).expect("count"))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().clone().reshape(shape.to_vec())?;
        self.tape.record(&[self], out, Reshape)
    }

    /// `[start, start + len)` along the leading axis.
    pub fn slice0(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value().slice0(start, len)?;
        self.tape.record(&[self], out, Slice0 { start })
    }

    /// Stacks equally-shaped values along a new leading axis.
    pub fn stack0(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let owned: Vec<Tensor<T>> = values.iter().map(|v| (**v).clone()).collect();
            Tensor::stack(&owned)?
        };
        first.tape.record(parts, out, Stack0)
    }

    /// Swaps the two leading axes.
    pub fn swap01(self) -> Result<Var<'t, T>> {
        let (out, f) = {
            let v = self.value();
            let f = Swap01 {
                a: v.shape().first().copied().unwrap_or(0),
                b: v.shape().get(1).copied().unwrap_or(0),
            };
            (v.swap01()?, f)
        };
        self.tape.record(&[self], out, f)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = {
            let v = self.value();
            if axis >= v.ndim() {
                return Err(Error::shape(format!(
                    "softmax axis {axis} for shape {:?}",
                    v.shape()
                )));
            }
            Tensor::new(
                v.shape().to_vec(),
                softmax_forward(v.data(), v.shape(), axis),
            )?
        };
        self.tape.record(&[self], out, Softmax { axis })
    }

    /// `(m, k) · (k, n)`
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, f) = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data(),
                (k, 1),
                b.data(),
                (n, 1),
                T::zero(),
                &mut c,
                (n, 1),
            );
            (Tensor::new([m, n], c)?, MatMul { m, k, n })
        };
        self.tape.record(&[self, other], out, f)
    }
}
