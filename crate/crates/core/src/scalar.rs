//! Scalar types the engine is generic over.
//!
//! Training runs in `f32`; gradient checking and the exactness tests run the
//! same code instantiated at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type tag, shared by the checkpoint and NPY encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Compact tag used in checkpoint parameter tables.
    pub fn tag(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::U8),
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type of a [`Tensor`](crate::Tensor).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// In-place `exp` over a slice. The `f32` version is a vectorizable
    /// polynomial accurate to about one ulp.
    fn exp_in_place(xs: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless for `f32 -> f64`, rounding for `f64 -> f32`.
    fn cast<U: Scalar>(self) -> U {
        U::from_f64(self.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan)
    }
}

/// Shorthand for a literal in generic code.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

fn check_gemm_bounds(rows: usize, cols: usize, strides: (usize, usize), len: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(
        last < len,
        "gemm operand {what} out of bounds: {last} >= {len}"
    );
}

macro_rules! gemm_impl {
    ($func:path, $t:ty) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            alpha: Self,
            a: &[Self],
            a_strides: (usize, usize),
            b: &[Self],
            b_strides: (usize, usize),
            beta: Self,
            c: &mut [Self],
            c_strides: (usize, usize),
        ) {
            check_gemm_bounds(m, k, a_strides, a.len(), "a");
            check_gemm_bounds(k, n, b_strides, b.len(), "b");
            check_gemm_bounds(m, n, c_strides, c.len(), "c");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: every addressed element was bounds-checked above and the
            // output slice is uniquely borrowed.
            unsafe {
                $func(
                    m,
                    k,
                    n,
                    alpha,
                    a.as_ptr(),
                    a_strides.0 as isize,
                    a_strides.1 as isize,
                    b.as_ptr(),
                    b_strides.0 as isize,
                    b_strides.1 as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_strides.0 as isize,
                    c_strides.1 as isize,
                );
            }
        }
    };
}

#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    // exp(x) = 2^n * exp(r), |r| <= ln2/2; the integer part is recovered from
    // the mantissa of the magic-shifted value so the loop stays branch-free.
    const MAGIC: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * std::f32::consts::LOG2_E + MAGIC;
    let n = shifted - MAGIC;
    let ni = shifted.to_bits().wrapping_sub(0x4B40_0000);
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let p = ((((1.987_569_1e-4f32 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2)
        * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(ni.wrapping_add(127) << 23)
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    gemm_impl!(matrixmultiply::sgemm, f32);

    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    gemm_impl!(matrixmultiply::dgemm, f64);

    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Sum with eight independent accumulators, combined in a fixed order.
#[inline]
pub(crate) fn sum_slice<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    let mut total = T::zero();
    for a in acc {
        total += a;
    }
    for &x in rem {
        total += x;
    }
    total
}

/// `c[i·ldc + j] += α Σ_p a[i·rs + p·cs] · b[p·n + j]` for a small inner
/// dimension `k`: each output row is built from row-wise multiply-adds over
/// the contiguous rows of `b`, four at a time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rs, cs): (usize, usize),
    b: &[T],
    c: &mut [T],
    ldc: usize,
) {
    assert!(
        b.len() >= k * n
            && (m == 0 || k == 0 || a.len() > (m - 1) * rs + (k - 1) * cs)
            && (m == 0 || c.len() >= (m - 1) * ldc + n),
        "gemm_rows_acc operand out of bounds"
    );
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        let coef = |p: usize| alpha * a[i * rs + p * cs];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for p in p..k {
            let ap = coef(p);
            for (cj, &bj) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += ap * bj;
            }
        }
    }
}

/// `c[i·ldc + j] += Σ_p a[i·k + p] · b[j·k + p]` for row-major `a: (m, k)`
/// and `b: (n, k)`. Both operands are read along contiguous rows, which is
/// the layout that strided `gemm` handles worst.
pub(crate) fn gemm_nt_acc<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    ldc: usize,
) {
    assert!(
        a.len() >= m * k && b.len() >= n * k && (m == 0 || n == 0 || c.len() >= (m - 1) * ldc + n),
        "gemm_nt_acc operand out of bounds"
    );
    for j in 0..n {
        let bj = &b[j * k..(j + 1) * k];
        let mut i = 0;
        while i + 4 <= m {
            let d = dot16x4(
                [
                    &a[i * k..(i + 1) * k],
                    &a[(i + 1) * k..(i + 2) * k],
                    &a[(i + 2) * k..(i + 3) * k],
                    &a[(i + 3) * k..(i + 4) * k],
                ],
                bj,
            );
            for (r, v) in d.into_iter().enumerate() {
                c[(i + r) * ldc + j] += v;
            }
            i += 4;
        }
        for i in i..m {
            c[i * ldc + j] += dot16(&a[i * k..(i + 1) * k], bj);
        }
    }
}

/// Dot product over 16 interleaved partial sums.
#[inline]
fn dot16<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = sum_slice(&acc);
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

/// Four [`dot16`]s sharing `b`.
#[inline]
fn dot16x4<T: Scalar>(a: [&[T]; 4], b: &[T]) -> [T; 4] {
    let len = b.len();
    let full = len - len % 16;
    let mut acc = [[T::zero(); 16]; 4];
    let rows = a[0][..full]
        .chunks_exact(16)
        .zip(a[1][..full].chunks_exact(16))
        .zip(a[2][..full].chunks_exact(16))
        .zip(a[3][..full].chunks_exact(16))
        .zip(b[..full].chunks_exact(16));
    for ((((x0, x1), x2), x3), y) in rows {
        for l in 0..16 {
            acc[0][l] += x0[l] * y[l];
            acc[1][l] += x1[l] * y[l];
            acc[2][l] += x2[l] * y[l];
            acc[3][l] += x3[l] * y[l];
        }
    }
    std::array::from_fn(|r| {
        let mut total = sum_slice(&acc[r]);
        for q in full..len {
            total += a[r][q] * b[q];
        }
        total
    })
}

/// Dot product with the same fixed reduction order as [`sum_slice`].
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut total = T::zero();
    for a in acc {
        total += a;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        for i in -8000..8000 {
            let x = i as f32 / 100.0;
            let mut v = [x];
            f32::exp_in_place(&mut v);
            let exact = (x as f64).exp();
            worst = worst.max(((v[0] as f64 - exact) / exact).abs());
        }
        assert!(worst < 2e-7, "worst relative error {worst}");
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn dot_and_sum_agree_with_naive_on_small_inputs() {
        let a: Vec<f64> = (0..19).map(|x| x as f64).collect();
        assert_eq!(sum_slice(&a), 171.0);
        assert_eq!(dot(&a, &a), (0..19).map(|x| (x * x) as f64).sum::<f64>());
    }
}
