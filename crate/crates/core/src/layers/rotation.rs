//! Rotation of square frames about their center with bilinear interpolation
//! and zero fill.
//!
//! An output pixel `p` samples the input at `c + R(−θ)(p − c)`, where `c` is
//! the frame center and `R` the counter-clockwise rotation in `(x, y)` pixel
//! coordinates.

use rand::Rng;

use super::Mode;
use crate::autodiff::{BackwardContext, Function, Var};
use crate::error::{Error, Result};
use crate::scalar::lit;
use crate::tensor::Tensor;
use crate::Scalar;

/// Precomputed bilinear taps for one frame size and angle.
#[derive(Debug, Clone)]
pub struct RotationMap {
    size: usize,
    /// Four `(source index, weight)` taps per output pixel; out-of-frame taps
    /// are dropped.
    taps: Vec<Vec<(usize, f64)>>,
}

impl RotationMap {
    pub fn new(size: usize, degrees: f64) -> Self {
        let theta = degrees.to_radians();
        let (sin, cos) = theta.sin_cos();
        let center = (size as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - center, y as f64 - center);
                let sx = center + cos * dx + sin * dy;
                let sy = center - sin * dx + cos * dy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let mut pixel = Vec::with_capacity(4);
                for (ox, oy, w) in [
                    (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                    (1.0, 0.0, fx * (1.0 - fy)),
                    (0.0, 1.0, (1.0 - fx) * fy),
                    (1.0, 1.0, fx * fy),
                ] {
                    let (ix, iy) = (x0 + ox, y0 + oy);
                    if w != 0.0 && ix >= 0.0 && iy >= 0.0 && ix < size as f64 && iy < size as f64 {
                        pixel.push((iy as usize * size + ix as usize, w));
                    }
                }
                taps.push(pixel);
            }
        }
        Self { size, taps }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Rotates one `size × size` plane.
    pub fn apply<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        for (out, pixel) in dst.iter_mut().zip(&self.taps) {
            *out = pixel
                .iter()
                .fold(T::zero(), |acc, &(i, w)| acc + src[i] * lit::<T>(w));
        }
    }

    /// Adjoint of [`apply`](Self::apply): scatters `grad` back onto the
    /// source plane, accumulating into `dst`.
    pub fn apply_transpose<T: Scalar>(&self, grad: &[T], dst: &mut [T]) {
        for (&g, pixel) in grad.iter().zip(&self.taps) {
            for &(i, w) in pixel {
                dst[i] += g * lit::<T>(w);
            }
        }
    }
}

fn square_planes(shape: &[usize]) -> Result<(usize, usize)> {
    let n = shape.len();
    if n < 2 || shape[n - 1] != shape[n - 2] {
        return Err(Error::shape(format!(
            "rotation needs square frames, got {shape:?}"
        )));
    }
    let size = shape[n - 1];
    Ok((shape[..n - 2].iter().product(), size))
}

/// Rotates every `H × W` plane of `frames` by `degrees`.
pub fn rotate_frame<T: Scalar>(frames: &Tensor<T>, degrees: f64) -> Result<Tensor<T>> {
    let (planes, size) = square_planes(frames.shape())?;
    let map = RotationMap::new(size, degrees);
    let mut out = Tensor::zeros(frames.shape().to_vec());
    let area = size * size;
    for p in 0..planes {
        let r = p * area..(p + 1) * area;
        map.apply(&frames.data()[r.clone()], &mut out.data_mut()[r]);
    }
    Ok(out)
}

/// Draws one angle uniformly in `[−max_deg, +max_deg]`.
pub fn draw_angle(max_deg: f64, rng: &mut impl Rng) -> f64 {
    max_deg * (2.0 * rng.gen::<f64>() - 1.0)
}

/// Train mode: rotates every frame of one `(T, C, H, W)` sequence by a single
/// random angle. Infer mode returns the input unchanged and consumes no
/// randomness.
pub fn random_rotation<T: Scalar>(
    seq: &Tensor<T>,
    max_deg: f64,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<Tensor<T>> {
    square_planes(seq.shape())?;
    match mode {
        Mode::Infer => Ok(seq.clone()),
        Mode::Train => rotate_frame(seq, draw_angle(max_deg, rng)),
    }
}

struct Rotate {
    /// One map per batch element.
    maps: Vec<RotationMap>,
    /// `(T, B, C)` leading extents.
    lead: [usize; 3],
}

impl<T: Scalar> Function<T> for Rotate {
    fn name(&self) -> &'static str {
        "rotate"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); grad.len()];
        let area = self.maps[0].size().pow(2);
        let [t, b, c] = self.lead;
        for ti in 0..t {
            for bi in 0..b {
                for ci in 0..c {
                    let p = (ti * b + bi) * c + ci;
                    let r = p * area..(p + 1) * area;
                    self.maps[bi].apply_transpose(&grad[r.clone()], &mut gx[r]);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Differentiable rotation of `(T, B, C, H, W)` feature maps, one angle per
/// batch element.
pub fn rotate_batch<'t, T: Scalar>(x: Var<'t, T>, degrees: &[f64]) -> Result<Var<'t, T>> {
    let (out, func) = {
        let xv = x.value();
        let &[t, b, c, h, w] = xv.shape() else {
            return Err(Error::shape(format!("rotate_batch input {:?}", xv.shape())));
        };
        if h != w || degrees.len() != b {
            return Err(Error::shape(format!(
                "rotate_batch: {h}x{w} frames with {} angles for batch {b}",
                degrees.len()
            )));
        }
        let maps: Vec<RotationMap> = degrees.iter().map(|&d| RotationMap::new(h, d)).collect();
        let area = h * w;
        let mut out = vec![T::zero(); xv.numel()];
        for ti in 0..t {
            for (bi, map) in maps.iter().enumerate() {
                for ci in 0..c {
                    let p = (ti * b + bi) * c + ci;
                    let r = p * area..(p + 1) * area;
                    map.apply(&xv.data()[r.clone()], &mut out[r]);
                }
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), out)?,
            Rotate {
                maps,
                lead: [t, b, c],
            },
        )
    };
    x.tape().record(&[x], out, func)
}
