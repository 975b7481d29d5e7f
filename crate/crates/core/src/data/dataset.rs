//! Shifted input/target sequences and train/validation splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::npy::NpyArray;
use crate::error::{Error, Result};
use crate::scalar::{lit, DType};
use crate::tensor::Tensor;
use crate::Scalar;

/// Frame sequences in `[0, 1]` viewed as one-step-ahead pairs: `x` is frames
/// `0..F-1` and `y` frames `1..F` of each stored sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset<T: Scalar> {
    /// `(N, F, 1, H, W)`.
    frames: Tensor<T>,
}

impl<T: Scalar> SequenceDataset<T> {
    /// Wraps `(N, F, 1, H, W)` frames; needs `F >= 2` and values in `[0, 1]`.
    pub fn from_frames(frames: Tensor<T>) -> Result<Self> {
        match frames.shape() {
            [_, f, 1, _, _] if *f >= 2 => {}
            s => {
                return Err(Error::Dataset(format!(
                    "frames must be (N, F >= 2, 1, H, W), got {s:?}"
                )))
            }
        }
        if frames
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Dataset("frame values must lie in [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames per input (and per target) sequence.
    pub fn seq_len(&self) -> usize {
        self.frames.shape()[1] - 1
    }

    pub fn frame_size(&self) -> [usize; 2] {
        let s = self.frames.shape();
        [s[3], s[4]]
    }

    /// `(x, y)` for the listed sequences, each `(B, F-1, 1, H, W)`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let s = self.frames.shape();
        let (f, area) = (s[1], s[3] * s[4]);
        let seq_len = f - 1;
        let mut x = Vec::with_capacity(indices.len() * seq_len * area);
        let mut y = Vec::with_capacity(indices.len() * seq_len * area);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!(
                    "sequence {i} out of range {}",
                    self.len()
                )));
            }
            let seq = &self.frames.data()[i * f * area..(i + 1) * f * area];
            x.extend_from_slice(&seq[..seq_len * area]);
            y.extend_from_slice(&seq[area..]);
        }
        let shape = [indices.len(), seq_len, 1, s[3], s[4]];
        Ok((Tensor::new(shape, x)?, Tensor::new(shape, y)?))
    }

    /// Full `(N, F-1, 1, H, W)` inputs.
    pub fn x(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all).expect("non-empty dataset").0
    }

    /// Full `(N, F-1, 1, H, W)` targets.
    pub fn y(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all).expect("non-empty dataset").1
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        let parts = indices
            .iter()
            .map(|&i| {
                if i >= self.len() {
                    return Err(Error::Dataset(format!(
                        "sequence {i} out of range {}",
                        self.len()
                    )));
                }
                self.frames.slice0(i, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut shape = self.frames.shape().to_vec();
        shape[0] = indices.len();
        let data: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Self {
            frames: Tensor::new(shape, data)?,
        })
    }

    /// 2×2 average pooling of every frame; frame sides must be even.
    pub fn downscale2x(&self) -> Result<Self> {
        Self::from_frames(pool2x(&self.frames)?)
    }
}

/// 2×2 average pooling over the last two axes; both must be even.
pub fn pool2x<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let s = frames.shape();
    let &[.., h, w] = s else {
        return Err(Error::shape(format!("cannot pool a tensor of shape {s:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dataset(format!("cannot halve {h}x{w} frames")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut out = Vec::with_capacity(frames.numel() / 4);
    for plane in frames.data().chunks(h * w) {
        for y in 0..ho {
            let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
            for x in 0..wo {
                let sum = plane[r0 + 2 * x]
                    + plane[r0 + 2 * x + 1]
                    + plane[r1 + 2 * x]
                    + plane[r1 + 2 * x + 1];
                out.push(sum * quarter);
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(shape, out)
}

/// Builds shifted pairs from a raw `(F, N, H, W)` array (frame-major, as the
/// Moving MNIST file stores it), keeping the first `n_sequences` sequences.
/// `u8` values are scaled by `1/255`; float arrays must already be in
/// `[0, 1]`.
pub fn make_shifted_pairs<T: Scalar>(
    raw: &NpyArray,
    n_sequences: usize,
) -> Result<SequenceDataset<T>> {
    let &[f, n, h, w] = raw.shape() else {
        return Err(Error::Dataset(format!(
            "expected a (frames, sequences, H, W) array, got {:?}",
            raw.shape()
        )));
    };
    if n_sequences > n {
        return Err(Error::Dataset(format!(
            "requested {n_sequences} sequences but the array holds {n}"
        )));
    }
    if n_sequences == 0 {
        return Err(Error::Dataset("n_sequences must be at least 1".into()));
    }
    let area = h * w;
    let max = lit::<T>(255.0);
    let mut data = Vec::with_capacity(n_sequences * f * area);
    for s in 0..n_sequences {
        for t in 0..f {
            let base = (t * n + s) * area;
            match raw.dtype() {
                DType::U8 => data.extend(
                    raw.raw()[base..base + area]
                        .iter()
                        .map(|&b| T::from_u8(b).expect("u8 fits") / max),
                ),
                _ => data.extend((base..base + area).map(|i| lit::<T>(raw.get_f64(i)))),
            }
        }
    }
    SequenceDataset::from_frames(Tensor::new([n_sequences, f, 1, h, w], data)?)
}

/// Seeded shuffle of `0..n` cut into `(train, val)` with
/// `round(n · test_fraction)` validation indices.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Dataset(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n_val = (n as f64 * test_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Dataset(format!(
            "fraction {test_fraction} of {n} sequences leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

pub fn split<T: Scalar>(
    ds: &SequenceDataset<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(SequenceDataset<T>, SequenceDataset<T>)> {
    let (train, val) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}
