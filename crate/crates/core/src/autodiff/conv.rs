//! 2-D and 3-D convolutions (cross-correlation, as in every DL framework).
//!
//! The input is unfolded into a `(C_in·kT·kH·kW, positions)` matrix per batch
//! element (zeros for padding) and contracted with the kernel by matrix
//! products; the bias is added last. Backward recomputes the unfolded input
//! instead of keeping it.

use super::{BackwardContext, Function, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm_nt_acc, gemm_rows_acc, sum_slice, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial size (odd kernels only).
    Same,
    Valid,
}

/// Geometry of a convolution over `(T, B, C_in, H, W)`; 2-D convolutions
/// are the `T = 1`, `kT = 1` case, whose memory layout is `(B, C_in, H, W)`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    t: usize,
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    to: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input: one per `(c, dt, dy, dx)`.
    fn patch(&self) -> usize {
        self.c_in * self.k[0] * self.k[1] * self.k[2]
    }

    /// Columns of the unfolded input: one per output position `(t, y, x)`.
    fn positions(&self) -> usize {
        self.to * self.ho * self.wo
    }

    /// For each tap `d` along an axis, the input coordinate read by every
    /// output coordinate (`None` for padding).
    fn axis_map(&self, axis: usize) -> Vec<Vec<Option<usize>>> {
        let (extent, out) = match axis {
            0 => (self.t, self.to),
            1 => (self.h, self.ho),
            _ => (self.w, self.wo),
        };
        (0..self.k[axis])
            .map(|d| {
                (0..out)
                    .map(|o| {
                        let p = (o * self.stride[axis] + d).checked_sub(self.pad[axis])?;
                        (p < extent).then_some(p)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Precomputed tap maps, shared by unfold and fold.
struct Taps {
    t: Vec<Vec<Option<usize>>>,
    y: Vec<Vec<Option<usize>>>,
    x: Vec<Vec<Option<usize>>>,
}

impl Taps {
    fn new(g: &ConvGeom) -> Self {
        Self {
            t: g.axis_map(0),
            y: g.axis_map(1),
            x: g.axis_map(2),
        }
    }

    /// Visits `(column, input index, length)` runs covering every in-range
    /// tap of patch row `(c, dt, dy, dx)` of batch element `b`.
    #[inline]
    fn each(
        &self,
        g: &ConvGeom,
        b: usize,
        [c, dt, dy, dx]: [usize; 4],
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let xs = &self.x[dx];
        // with unit column stride the valid columns form one contiguous run
        let run = (g.stride[2] == 1).then(|| {
            let lo = xs.iter().position(Option::is_some).unwrap_or(xs.len());
            let hi = xs.iter().rposition(Option::is_some).map_or(lo, |p| p + 1);
            (lo, hi)
        });
        for (to, ti) in self.t[dt].iter().enumerate() {
            let Some(ti) = ti else { continue };
            let plane = ((ti * g.batch + b) * g.c_in + c) * g.h * g.w;
            for (oy, iy) in self.y[dy].iter().enumerate() {
                let Some(iy) = iy else { continue };
                let col = (to * g.ho + oy) * g.wo;
                let row = plane + iy * g.w;
                match run {
                    Some((lo, hi)) if hi > lo => {
                        f(col + lo, row + xs[lo].expect("in range"), hi - lo);
                    }
                    Some(_) => {}
                    None => {
                        for (ox, ix) in xs.iter().enumerate() {
                            if let Some(ix) = ix {
                                f(col + ox, row + ix, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn rows(g: &ConvGeom) -> impl Iterator<Item = [usize; 4]> {
        let [kt, kh, kw] = g.k;
        (0..g.c_in).flat_map(move |c| {
            (0..kt).flat_map(move |dt| {
                (0..kh).flat_map(move |dy| (0..kw).map(move |dx| [c, dt, dy, dx]))
            })
        })
    }

    /// Unfolded input of batch element `b`, `(patch, positions)`.
    fn unfold<T: Scalar>(&self, g: &ConvGeom, x: &[T], b: usize, col: &mut [T]) {
        let p = g.positions();
        col.fill(T::zero());
        for (r, tap) in Self::rows(g).enumerate() {
            let dst = &mut col[r * p..(r + 1) * p];
            self.each(g, b, tap, |j, i, n| {
                dst[j..j + n].copy_from_slice(&x[i..i + n])
            });
        }
    }

    /// Adjoint of [`unfold`](Self::unfold): scatter-adds `col` into `gx`.
    fn fold<T: Scalar>(&self, g: &ConvGeom, col: &[T], b: usize, gx: &mut [T]) {
        let p = g.positions();
        for (r, tap) in Self::rows(g).enumerate() {
            let src = &col[r * p..(r + 1) * p];
            self.each(g, b, tap, |j, i, n| {
                for (d, &v) in gx[i..i + n].iter_mut().zip(&src[j..j + n]) {
                    *d += v;
                }
            });
        }
    }
}

/// Offset of output `(to, b, o)` plane start, and the same for batch-local
/// `(o, to)` in a `(C_out, positions)` scratch.
#[inline]
fn out_plane(g: &ConvGeom, to: usize, b: usize, o: usize) -> usize {
    ((to * g.batch + b) * g.c_out + o) * g.ho * g.wo
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (patch, p, plane) = (g.patch(), g.positions(), g.ho * g.wo);
    let taps = Taps::new(g);
    let mut out = vec![T::zero(); g.to * g.batch * g.c_out * plane];
    let mut col = vec![T::zero(); patch * p];
    let mut ob = vec![T::zero(); g.c_out * p];
    for b in 0..g.batch {
        taps.unfold(g, x, b, &mut col);
        T::gemm(
            g.c_out,
            patch,
            p,
            T::one(),
            k,
            (patch, 1),
            &col,
            (p, 1),
            T::zero(),
            &mut ob,
            (p, 1),
        );
        for o in 0..g.c_out {
            let bv = bias.map_or(T::zero(), |bias| bias[o]);
            for to in 0..g.to {
                let dst = &mut out[out_plane(g, to, b, o)..][..plane];
                let src = &ob[o * p + to * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
    }
    out
}

struct Conv {
    name: &'static str,
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> Function<T> for Conv {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let x = ctx.input(0).data();
        let k = ctx.input(1).data();
        let (patch, p, plane) = (g.patch(), g.positions(), g.ho * g.wo);
        let taps = Taps::new(g);
        let (need_x, need_k) = (ctx.needs_grad(0), ctx.needs_grad(1));
        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gk = need_k.then(|| vec![T::zero(); k.len()]);
        let mut col = vec![T::zero(); patch * p];
        let mut gb = vec![T::zero(); g.c_out * p];
        for b in 0..g.batch {
            if !need_x && !need_k {
                break;
            }
            // this batch element's output gradient as (C_out, positions)
            for o in 0..g.c_out {
                for to in 0..g.to {
                    gb[o * p + to * plane..][..plane]
                        .copy_from_slice(&grad[out_plane(g, to, b, o)..][..plane]);
                }
            }
            if let Some(gk) = gk.as_mut() {
                taps.unfold(g, x, b, &mut col);
                // dK += G colᵀ
                gemm_nt_acc(g.c_out, patch, p, &gb, &col, gk, patch);
            }
            if let Some(gx) = gx.as_mut() {
                // dcol = Kᵀ G, folded back onto the input
                col.fill(T::zero());
                gemm_rows_acc(patch, g.c_out, p, T::one(), k, (1, patch), &gb, &mut col, p);
                taps.fold(g, &col, b, gx);
            }
        }
        let mut out = vec![gx, gk];
        if self.has_bias {
            let gbias = ctx.needs_grad(2).then(|| {
                let mut acc = vec![T::zero(); g.c_out];
                for (i, chunk) in grad.chunks(plane).enumerate() {
                    acc[i % g.c_out] += sum_slice(chunk);
                }
                acc
            });
            out.push(gbias);
        }
        out
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D convolution of `(B, C_in, H, W)` or `(C_in, H, W)` input with a
    /// `(C_out, C_in, kH, kW)` kernel and optional `(C_out)` bias.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        padding: Padding,
    ) -> Result<Var<'t, T>> {
        let (out, geom) = {
            let xv = self.value();
            let kv = kernel.value();
            let (xs, ks) = (xv.shape(), kv.shape());
            let unbatched = xs.len() == 3;
            let (batch, c_in, h, w) = match *xs {
                [c, h, w] => (1, c, h, w),
                [b, c, h, w] => (b, c, h, w),
                _ => return Err(Error::shape(format!("conv2d input {xs:?}"))),
            };
            let [c_out, kc, kh, kw] = *ks else {
                return Err(Error::shape(format!("conv2d kernel {ks:?}")));
            };
            if kc != c_in {
                return Err(Error::shape(format!(
                    "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
                )));
            }
            if let Some(b) = bias {
                if b.value().shape() != [c_out] {
                    return Err(Error::shape(format!(
                        "conv2d bias {:?} for {c_out} output channels",
                        b.value().shape()
                    )));
                }
            }
            let (ph, pw) = match padding {
                Padding::Same => {
                    if kh % 2 == 0 || kw % 2 == 0 {
                        return Err(Error::shape(format!(
                            "same padding needs odd kernel, got {kh}x{kw}"
                        )));
                    }
                    (kh / 2, kw / 2)
                }
                Padding::Valid => (0, 0),
            };
            if h + 2 * ph < kh || w + 2 * pw < kw {
                return Err(Error::shape(format!(
                    "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            let geom = ConvGeom {
                t: 1,
                batch,
                c_in,
                h,
                w,
                c_out,
                k: [1, kh, kw],
                stride: [1, 1, 1],
                pad: [0, ph, pw],
                to: 1,
                ho: h + 2 * ph - kh + 1,
                wo: w + 2 * pw - kw + 1,
            };
            let bias_val = bias.map(|b| b.value().data().to_vec());
            let data = conv_forward(&geom, xv.data(), kv.data(), bias_val.as_deref());
            let shape = if unbatched {
                vec![c_out, geom.ho, geom.wo]
            } else {
                vec![batch, c_out, geom.ho, geom.wo]
            };
            (Tensor::new(shape, data)?, geom)
        };
        let f = Conv {
            name: "conv2d",
            geom,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.tape.record(&[self, kernel, b], out, f),
            None => self.tape.record(&[self, kernel], out, f),
        }
    }

    /// 3-D convolution over `(T, B, C_in, H, W)` with a
    /// `(C_out, C_in, kT, kH, kW)` kernel, producing `(T', B, C_out, H', W')`.
    pub fn conv3d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var<'t, T>> {
        let (out, geom) = {
            let xv = self.value();
            let kv = kernel.value();
            let [t, batch, c_in, h, w] = *xv.shape() else {
                return Err(Error::shape(format!("conv3d input {:?}", xv.shape())));
            };
            let [c_out, kc, kt, kh, kw] = *kv.shape() else {
                return Err(Error::shape(format!("conv3d kernel {:?}", kv.shape())));
            };
            if kc != c_in {
                return Err(Error::shape(format!(
                    "conv3d channel mismatch: input has {c_in}, kernel expects {kc}"
                )));
            }
            if stride.contains(&0) {
                return Err(Error::invalid("conv3d stride must be positive"));
            }
            let dims = [t, h, w];
            let ks = [kt, kh, kw];
            let mut outs = [0; 3];
            for a in 0..3 {
                if dims[a] + 2 * pad[a] < ks[a] {
                    return Err(Error::shape(format!(
                        "conv3d kernel {ks:?} larger than padded input {dims:?}"
                    )));
                }
                outs[a] = (dims[a] + 2 * pad[a] - ks[a]) / stride[a] + 1;
            }
            if let Some(b) = bias {
                if b.value().shape() != [c_out] {
                    return Err(Error::shape("conv3d bias shape"));
                }
            }
            let geom = ConvGeom {
                t,
                batch,
                c_in,
                h,
                w,
                c_out,
                k: ks,
                stride,
                pad,
                to: outs[0],
                ho: outs[1],
                wo: outs[2],
            };
            let bias_val = bias.map(|b| b.value().data().to_vec());
            let data = conv_forward(&geom, xv.data(), kv.data(), bias_val.as_deref());
            (
                Tensor::new([geom.to, batch, c_out, geom.ho, geom.wo], data)?,
                geom,
            )
        };
        let f = Conv {
            name: "conv3d",
            geom,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.tape.record(&[self, kernel, b], out, f),
            None => self.tape.record(&[self, kernel], out, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn([1, 4, 5], |i| (i as f64 * 0.37).cos());
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = xv.conv2d(k, Some(b), Padding::Same).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn valid_ones_sum_to_nine() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(k, Some(b), Padding::Valid).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn conv2d_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([2, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            x.conv2d(k, None, Padding::Same),
            Err(Error::Shape(_))
        ));
        let even = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(x.conv2d(even, None, Padding::Same).is_err());
        assert!(x.conv2d(even, None, Padding::Valid).is_ok());
    }

    #[test]
    fn conv3d_same_preserves_extent_and_strided_halves() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([3, 2, 1, 8, 8], 1.0));
        let k = tape.constant(Tensor::full([4, 1, 3, 3, 3], 1.0));
        let y = x.conv3d(k, None, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(y.value().shape(), &[3, 2, 4, 8, 8]);
        // interior element sees the full 27-tap window
        assert_eq!(y.value().get(&[1, 0, 0, 4, 4]), 27.0);
        // corner of the first frame sees 2x2x2
        assert_eq!(y.value().get(&[0, 0, 0, 0, 0]), 8.0);
        let z = x.conv3d(k, None, [1, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(z.value().shape(), &[3, 2, 4, 4, 4]);
    }
}
