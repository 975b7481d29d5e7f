mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vapaad::cli::{quantize, GrayFrame};
use vapaad::data::{make_shifted_pairs, parse_npy, split_indices, write_npy, NpyArray};
use vapaad::layers::{
    attention_weights, batchnorm, convlstm_step, random_rotation, self_attention, AttentionParams,
    BatchNormParams, ConvLstmParams, ConvLstmState, Mode,
};
use vapaad::model::{VapaadConfig, VapaadModel};
use vapaad::optim::{Adam, AdamConfig};
use vapaad::training::{instructor_loss, minimax_loss, reconstruction_loss};
use vapaad::{Padding, Tape, Tensor};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

fn tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    common::uniform(shape, lo, hi, seed)
}

/// Direct convolution accumulated tap by tap in `(c, ky, kx)` order, the
/// same order the GEMM kernel uses, with fused multiply-adds exactly when
/// the kernel has them.
fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], pad: usize) -> Tensor<f64> {
    let fused = fused_multiply_add();
    let &[b, c, h, w] = x.shape() else {
        unreachable!()
    };
    let &[o, _, kh, kw] = k.shape() else {
        unreachable!()
    };
    let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    Tensor::from_fn([b, o, ho, wo], |i| {
        let (bi, oi, y, xx) = (i / (o * ho * wo), i / (ho * wo) % o, i / wo % ho, i % wo);
        let mut acc = 0.0f64;
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (iy, ix) = (
                        (y + ky) as isize - pad as isize,
                        (xx + kx) as isize - pad as isize,
                    );
                    let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        0.0
                    } else {
                        x.get(&[bi, ci, iy as usize, ix as usize])
                    };
                    let kv = k.get(&[oi, ci, ky, kx]);
                    acc = if fused {
                        kv.mul_add(v, acc)
                    } else {
                        acc + kv * v
                    };
                }
            }
        }
        acc + bias[oi]
    })
}

fn fused_multiply_add() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("fma") && std::is_x86_feature_detected!("avx")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        cfg!(target_feature = "neon")
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn conv2d_equals_direct_oracle_bitwise(
        b in 1usize..=2, c in 1usize..=3, o in 1usize..=3,
        h in 1usize..=8, w in 1usize..=8, k in prop::sample::select(vec![1usize, 3, 5]),
        same in any::<bool>(), seed in any::<u64>(),
    ) {
        let pad = if same { k / 2 } else { 0 };
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = tensor(&[b, c, h, w], -1.0, 1.0, seed);
        let kt = tensor(&[o, c, k, k], -1.0, 1.0, seed ^ 1);
        let bias = tensor(&[o], -1.0, 1.0, seed ^ 2);
        let tape = Tape::no_grad();
        let padding = if same { Padding::Same } else { Padding::Valid };
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(kt.clone()), Some(tape.constant(bias.clone())), padding)
            .unwrap();
        let want = conv2d_oracle(&x, &kt, bias.data(), pad);
        let got = out.value();
        prop_assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            prop_assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        rows in 1usize..5, cols in 1usize..40, shift in -50.0f64..50.0, seed in any::<u64>(),
    ) {
        let x = tensor(&[rows, cols], -10.0, 10.0, seed);
        let tape = Tape::no_grad();
        let s = tape.constant(x.clone()).softmax(1).unwrap();
        let shifted = tape.constant(x.map(|v| v + shift)).softmax(1).unwrap();
        let (s, shifted) = (s.value(), shifted.value());
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(s.max_abs_diff(&shifted) < 1e-6);
    }

    #[test]
    fn repeated_backward_after_reset_is_identical(seed in any::<u64>()) {
        let x = tensor(&[2, 2, 4, 4], -1.0, 1.0, seed);
        let k = tensor(&[3, 2, 3, 3], -1.0, 1.0, seed ^ 7);
        let tape = Tape::new();
        let xv = tape.param(&x);
        let kv = tape.param(&k);
        let loss = xv.conv2d(kv, None, Padding::Same).unwrap().tanh().unwrap().square().unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        let first = (tape.grad(xv).unwrap(), tape.grad(kv).unwrap());
        tape.zero_grad();
        tape.backward(loss).unwrap();
        let second = (tape.grad(xv).unwrap(), tape.grad(kv).unwrap());
        prop_assert_eq!(first.0.data(), second.0.data());
        prop_assert_eq!(first.1.data(), second.1.data());
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn attention_rows_are_distributions_and_shape_is_kept(
        c in 1usize..=4, side in 1usize..=6, lead in 1usize..=2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::<f64>::glorot(c, &mut rng);
        let x = tensor(&[lead, c, side, side], -2.0, 2.0, seed);
        let a = attention_weights(&x, &p).unwrap();
        let n = side * side;
        prop_assert_eq!(a.shape(), &[lead, n, n][..]);
        for row in a.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let tape = Tape::no_grad();
        let out = self_attention(tape.constant(x.clone()), &p.bind(&tape)).unwrap();
        prop_assert_eq!(out.shape(), x.shape().to_vec());
    }

    #[test]
    fn convlstm_keeps_spatial_size_and_bounds_hidden(
        c in 1usize..=3, f in 1usize..=3, side in 1usize..=6,
        k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = ConvLstmParams::<f64>::glorot(c, f, k, &mut rng);
        let tape = Tape::no_grad();
        let x = tape.constant(tensor(&[2, c, side, side], -3.0, 3.0, seed));
        let state = ConvLstmState {
            h: tape.constant(tensor(&[2, f, side, side], -1.0, 1.0, seed ^ 1)),
            c: tape.constant(tensor(&[2, f, side, side], -2.0, 2.0, seed ^ 2)),
        };
        let next = convlstm_step(x, &state, &cell.bind(&tape)).unwrap();
        prop_assert_eq!(next.h.shape(), vec![2, f, side, side]);
        prop_assert!(next.h.value().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn batchnorm_standardizes_each_channel(
        c in 1usize..=3, side in 2usize..=6, scale in 0.5f64..20.0, offset in -5.0f64..5.0,
        seed in any::<u64>(),
    ) {
        let norm = BatchNormParams::<f64>::new(c);
        let x = tensor(&[2, c, side, side], -1.0, 1.0, seed).map(|v| v * scale + offset);
        let tape = Tape::no_grad();
        let (out, _) = batchnorm(tape.constant(x), &norm.bind(&tape), Mode::Train).unwrap();
        let out = out.value();
        for ch in 0..c {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| {
                    let start = (b * c + ch) * side * side;
                    out.data()[start..start + side * side].to_vec()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rotation_uses_one_angle_per_sequence(
        t in 2usize..=5, side in 2usize..=8, seed in any::<u64>(),
    ) {
        let frame = tensor(&[1, 1, side, side], 0.0, 1.0, seed);
        let seq = Tensor::stack(&vec![frame; t]).unwrap().reshape([t, 1, side, side]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotated = random_rotation(&seq, 15.0, &mut rng, Mode::Train).unwrap();
        let area = side * side;
        for ti in 1..t {
            prop_assert_eq!(
                &rotated.data()[..area],
                &rotated.data()[ti * area..(ti + 1) * area]
            );
        }
        prop_assert!(rotated.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn parameter_iterator_matches_closed_form(
        blocks in 1usize..=3, attention in any::<bool>(), seed in any::<u64>(),
        filters in prop::collection::vec(1usize..=6, 3),
        kernels in prop::collection::vec(prop::sample::select(vec![1usize, 3, 5]), 3),
    ) {
        let cfg = VapaadConfig {
            frame_size: [8, 8],
            blocks,
            filters: filters[..blocks].to_vec(),
            kernels: kernels[..blocks].to_vec(),
            attention,
            ..VapaadConfig::default()
        };
        let model = VapaadModel::<f32>::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        prop_assert_eq!(unique.len(), names.len());
        let visited: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
        prop_assert_eq!(visited, cfg.param_count());
    }

    #[test]
    fn inference_is_a_pure_function(seed in any::<u64>()) {
        let cfg = VapaadConfig {
            frame_size: [8, 8],
            blocks: 1,
            filters: vec![2],
            kernels: vec![3],
            ..VapaadConfig::default()
        };
        let model = VapaadModel::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = Tensor::<f32>::uniform(vec![2, 3, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(!seed));
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn adam_bias_correction_recovers_constant_gradient(
        g in prop::collection::vec(-100.0f64..100.0, 1..6),
        beta1 in 0.0f64..0.999, beta2 in 0.0f64..0.9999,
    ) {
        let n = g.len();
        let mut adam = Adam::<f64>::new(AdamConfig { alpha: 1e-3, beta1, beta2, epsilon: 1e-8 }).unwrap();
        let mut theta = Tensor::zeros([n]);
        let grad = Some(Tensor::new([n], g.clone()).unwrap());
        for _ in 0..100 {
            adam.step(&mut [("p".to_string(), &mut theta)], std::slice::from_ref(&grad)).unwrap();
            let m_hat = adam.m_hat(0).unwrap();
            for (m, want) in m_hat.data().iter().zip(&g) {
                prop_assert!((m - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            prop_assert!(adam.v_hat(0).unwrap().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn adam_with_zero_rate_keeps_parameters_but_advances(
        theta in prop::collection::vec(-5.0f64..5.0, 1..6), seed in any::<u64>(),
    ) {
        let n = theta.len();
        let mut adam = Adam::<f64>::new(AdamConfig { alpha: 0.0, ..AdamConfig::default() }).unwrap();
        let mut p = Tensor::new([n], theta.clone()).unwrap();
        for step in 0..5u64 {
            let g = Some(tensor(&[n], -1.0, 1.0, seed.wrapping_add(step)));
            adam.step(&mut [("p".to_string(), &mut p)], std::slice::from_ref(&g)).unwrap();
        }
        prop_assert_eq!(p.data(), &theta[..]);
        prop_assert_eq!(adam.t, 5);
        prop_assert!(adam.m[0].data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn minimax_is_the_negated_instructor_loss(
        real in prop::collection::vec(0.0f64..=1.0, 1..8), seed in any::<u64>(),
    ) {
        let fake = tensor(&[real.len()], 0.0, 1.0, seed);
        let tape = Tape::no_grad();
        let r = tape.constant(Tensor::new([real.len()], real.clone()).unwrap());
        let f = tape.constant(fake);
        let value = minimax_loss(r, f).unwrap().value().item().unwrap();
        let inst = instructor_loss(r, f).unwrap().value().item().unwrap();
        prop_assert!((value + inst).abs() < 1e-9);
        prop_assert!(value <= 0.0);
    }

    #[test]
    fn reconstruction_loss_matches_scalar_oracle(
        n in 1usize..40, seed in any::<u64>(),
    ) {
        let p = tensor(&[n], 1e-3, 1.0 - 1e-3, seed);
        let y = tensor(&[n], 0.0, 1.0, seed ^ 3);
        let tape = Tape::no_grad();
        let loss = reconstruction_loss(tape.constant(p.clone()), tape.constant(y.clone()))
            .unwrap()
            .value()
            .item()
            .unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            let (pi, yi) = (p.data()[i], y.data()[i]);
            oracle -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
        }
        oracle /= n as f64;
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - oracle).abs() < 1e-6);
    }

    #[test]
    fn npy_round_trip_is_byte_exact(
        dims in prop::collection::vec(0usize..5, 0..4), kind in 0u8..3, seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let values = tensor(&[n], -1e6, 1e6, seed);
        let array = match kind {
            0 => NpyArray::from_u8(dims.clone(), values.data().iter().map(|v| *v as u8).collect()).unwrap(),
            1 => NpyArray::from_floats(dims.clone(), &values.cast::<f32>().into_data()).unwrap(),
            _ => NpyArray::from_floats(dims.clone(), values.data()).unwrap(),
        };
        let bytes = write_npy(&array);
        prop_assert_eq!(bytes.len() % 64, array.raw().len() % 64);
        let back = parse_npy(&bytes).unwrap();
        prop_assert_eq!(back.shape(), &dims[..]);
        prop_assert_eq!(back.raw(), array.raw());
        prop_assert_eq!(write_npy(&back), bytes);
    }

    #[test]
    fn split_is_a_stable_partition(
        n in 2usize..3000, fraction in 0.01f64..0.99, seed in any::<u64>(),
    ) {
        let Ok((train, val)) = split_indices(n, fraction, seed) else {
            let n_val = (n as f64 * fraction).round() as usize;
            prop_assert!(n_val == 0 || n_val >= n);
            return Ok(());
        };
        prop_assert_eq!(val.len(), (n as f64 * fraction).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, fraction, seed).unwrap(), (train, val));
    }

    #[test]
    fn shifted_pairs_overlap_and_stay_in_range(
        f in 2usize..8, n in 1usize..5, side in 1usize..5, seed in any::<u64>(),
    ) {
        let bytes: Vec<u8> = tensor(&[f * n * side * side], 0.0, 256.0, seed)
            .data()
            .iter()
            .map(|v| v.min(255.0) as u8)
            .collect();
        let raw = NpyArray::from_u8(vec![f, n, side, side], bytes.clone()).unwrap();
        let ds = make_shifted_pairs::<f64>(&raw, n).unwrap();
        let (x, y) = (ds.x(), ds.y());
        let area = side * side;
        let t = f - 1;
        for s in 0..n {
            for ti in 0..t - 1 {
                let xa = &x.data()[(s * t + ti + 1) * area..][..area];
                let ya = &y.data()[(s * t + ti) * area..][..area];
                prop_assert_eq!(xa, ya);
            }
        }
        for (i, &b) in bytes.iter().enumerate() {
            let (fi, rest) = (i / (n * area), i % (n * area));
            let (si, pix) = (rest / area, rest % area);
            let v = ds.frames().data()[(si * f + fi) * area + pix];
            prop_assert_eq!(v, b as f64 / 255.0);
            if b == 255 {
                prop_assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn quantization_inverts_the_byte_scale(k in 0u8..=255, jitter in -0.49f64..0.49) {
        prop_assert_eq!(quantize(k as f64 / 255.0).unwrap(), k);
        let p = ((k as f64 + jitter) / 255.0).clamp(0.0, 1.0);
        prop_assert_eq!(quantize(p).unwrap(), k);
    }

    #[test]
    fn pgm_reparses_to_the_quantized_frame(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let values = tensor(&[w * h], 0.0, 1.0, seed);
        let frame = GrayFrame::from_values(w, h, values.data()).unwrap();
        let expected: Vec<u8> = values.data().iter().map(|&v| quantize(v).unwrap()).collect();
        let back = GrayFrame::from_pgm(&frame.to_pgm()).unwrap();
        prop_assert_eq!(back.pixels, expected);
        prop_assert_eq!((back.width, back.height), (w, h));
    }
}
