#![allow(dead_code)]

pub mod checks;
pub mod grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vapaad::data::{make_shifted_pairs, synthetic_moving_glyphs, SequenceDataset};
use vapaad::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` synthetic sequences pooled from 64×64 down to `size`.
pub fn synthetic_dataset(n: usize, size: usize, seed: u64) -> SequenceDataset<f32> {
    let raw = synthetic_moving_glyphs(n, 64, seed).unwrap();
    let mut ds = make_shifted_pairs::<f32>(&raw, n).unwrap();
    while ds.frame_size()[0] > size {
        ds = ds.downscale2x().unwrap();
    }
    ds
}

/// Path of the built `vapaad` binary.
pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_vapaad"))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}
