//! Offline stand-in for Moving MNIST: two glyphs built from random
//! rectangles bouncing around a square canvas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::npy::NpyArray;
use crate::error::{Error, Result};

pub const SYNTHETIC_FRAMES: usize = 20;
const GLYPH: usize = 28;
const GLYPHS_PER_SEQUENCE: usize = 2;

/// A `GLYPH × GLYPH` intensity mask.
fn random_glyph(rng: &mut impl Rng) -> Vec<u8> {
    let mut g = vec![0u8; GLYPH * GLYPH];
    let strokes = rng.gen_range(3..=5);
    for _ in 0..strokes {
        let vertical = rng.gen_bool(0.5);
        let (long, thick) = (rng.gen_range(10..=22), rng.gen_range(3..=5));
        let (h, w) = if vertical {
            (long, thick)
        } else {
            (thick, long)
        };
        let y0 = rng.gen_range(2..=GLYPH - 2 - h);
        let x0 = rng.gen_range(2..=GLYPH - 2 - w);
        let value = rng.gen_range(180..=255u8);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let px = &mut g[y * GLYPH + x];
                *px = (*px).max(value);
            }
        }
    }
    g
}

/// Generates a `(20, sequences, size, size)` `u8` array in the Moving MNIST
/// layout. Each glyph moves in a straight line and reflects off the borders.
pub fn synthetic_moving_glyphs(sequences: usize, size: usize, seed: u64) -> Result<NpyArray> {
    if sequences == 0 || size <= GLYPH {
        return Err(Error::Dataset(format!(
            "synthetic data needs at least one sequence and frames larger than {GLYPH}px"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = size * size;
    let span = (size - GLYPH) as f64;
    let mut data = vec![0u8; SYNTHETIC_FRAMES * sequences * area];
    for s in 0..sequences {
        for _ in 0..GLYPHS_PER_SEQUENCE {
            let glyph = random_glyph(&mut rng);
            let (mut px, mut py) = (rng.gen::<f64>() * span, rng.gen::<f64>() * span);
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let speed = rng.gen_range(2.0..4.0);
            let (mut vx, mut vy) = (speed * theta.cos(), speed * theta.sin());
            for t in 0..SYNTHETIC_FRAMES {
                let frame = &mut data[(t * sequences + s) * area..(t * sequences + s + 1) * area];
                let (ox, oy) = (px.round() as usize, py.round() as usize);
                for gy in 0..GLYPH {
                    for gx in 0..GLYPH {
                        let v = glyph[gy * GLYPH + gx];
                        let dst = &mut frame[(oy + gy) * size + ox + gx];
                        *dst = (*dst).max(v);
                    }
                }
                px += vx;
                py += vy;
                if px < 0.0 || px > span {
                    vx = -vx;
                    px = px.clamp(0.0, span);
                }
                if py < 0.0 || py > span {
                    vy = -vy;
                    py = py.clamp(0.0, span);
                }
            }
        }
    }
    NpyArray::from_u8(vec![SYNTHETIC_FRAMES, sequences, size, size], data)
}
