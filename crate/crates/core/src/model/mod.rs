//! The generator ([`VapaadModel`]) and the discriminator
//! ([`InstructorModel`]).

mod config;
mod instructor;
mod vapaad;

pub use config::VapaadConfig;
pub use instructor::{InstructorModel, INSTRUCTOR_FILTERS};
pub use vapaad::{Block, Forward, VapaadModel};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(attention: bool) -> VapaadConfig {
        VapaadConfig {
            frame_size: [6, 6],
            blocks: 2,
            filters: vec![2, 3],
            kernels: vec![3, 1],
            attention,
            ..VapaadConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = VapaadModel::<f32>::build(tiny(true), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = VapaadModel::<f32>::build(tiny(true), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let c = VapaadModel::<f32>::build(tiny(true), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_architecture() {
        let cfg = VapaadConfig::default();
        let m = VapaadModel::<f32>::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let kernels: Vec<_> = m.blocks.iter().map(|b| b.convlstm.kernel()).collect();
        assert_eq!(kernels, vec![5, 3, 1]);
        assert!(m.blocks.iter().all(|b| b.convlstm.filters() == 64));
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn single_block_parameter_count() {
        let (f, k) = (5, 3);
        let cfg = VapaadConfig {
            frame_size: [8, 8],
            blocks: 1,
            filters: vec![f],
            kernels: vec![k],
            ..VapaadConfig::default()
        };
        let m = VapaadModel::<f64>::build(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let closed = 4 * f * k * k + 4 * f * f * k * k + 4 * f + 2 * f + 3 * f * f + 27 * f + 1;
        assert_eq!(m.param_count(), closed);
        let names: std::collections::BTreeSet<_> =
            m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), m.named_params().len());
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = VapaadModel::<f32>::build(tiny(true), &mut rng).unwrap();
        let x = Tensor::uniform([2, 3, 1, 6, 6], 0.0, 1.0, &mut rng);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mean = a.mean();
        assert!(mean > 0.3 && mean < 0.7);

        let t = m.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(t.shape(), x.shape());
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let m = VapaadModel::<f32>::build(tiny(true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.predict(&Tensor::zeros([1, 2, 1, 5, 5])).is_err());
        assert!(m.predict(&Tensor::zeros([1, 2, 2, 6, 6])).is_err());
    }

    #[test]
    fn rollout_matches_manual_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = VapaadModel::<f64>::build(tiny(true), &mut rng).unwrap();
        let seed = Tensor::uniform([2, 1, 6, 6], 0.0, 1.0, &mut rng);
        let out = m.rollout(&seed, 3).unwrap();
        assert_eq!(out.shape(), &[3, 1, 6, 6]);

        let mut ctx: Vec<Tensor<f64>> = (0..2).map(|t| seed.slice0(t, 1).unwrap()).collect();
        for step in 0..3 {
            let n = ctx.len();
            let x = Tensor::stack(&ctx)
                .unwrap()
                .reshape([1, n, 1, 6, 6])
                .unwrap();
            let pred = m.predict(&x).unwrap().reshape([n, 1, 1, 6, 6]).unwrap();
            let last = pred
                .slice0(n - 1, 1)
                .unwrap()
                .reshape([1, 1, 6, 6])
                .unwrap();
            assert_eq!(out.slice0(step, 1).unwrap(), last);
            ctx.push(last);
        }

        let one = m.rollout(&seed, 1).unwrap();
        let full = m
            .predict(&seed.clone().reshape([1, 2, 1, 6, 6]).unwrap())
            .unwrap();
        assert_eq!(one.data(), &full.data()[36..]);
        assert!(m.rollout(&seed, 0).is_err());
    }

    #[test]
    fn forward_on_tape_lists_params_in_name_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = VapaadModel::<f64>::build(tiny(false), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform([1, 2, 1, 6, 6], 0.0, 1.0, &mut rng));
        let f = m.forward_on_tape(&tape, x, Mode::Train, &mut rng).unwrap();
        let named = m.named_params();
        assert_eq!(f.params.len(), named.len());
        for (v, (_, t)) in f.params.iter().zip(&named) {
            assert_eq!(v.value().data(), t.data());
        }
        assert_eq!(f.batch_stats.len(), 2);
    }

    #[test]
    fn buffers_round_trip() {
        let mut m =
            VapaadModel::<f32>::build(tiny(true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = m.named_buffers().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 4);
        m.set_buffer("block1.norm.running_var", Tensor::full([3], 2.0))
            .unwrap();
        assert_eq!(m.named_buffers()[3].1.data(), &[2.0, 2.0, 2.0]);
        assert!(m
            .set_buffer("block9.norm.running_var", Tensor::full([3], 2.0))
            .is_err());
        assert!(m
            .set_buffer("block1.norm.running_var", Tensor::full([2], 2.0))
            .is_err());
    }

    #[test]
    fn zero_instructor_scores_half() {
        let inst = InstructorModel::<f64>::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = Tensor::uniform([3, 4, 1, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(inst.score(&seq).unwrap().data(), &[0.5, 0.5, 0.5]);
        let inst = InstructorModel::<f64>::build(&mut rng);
        let s = inst.score(&seq).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
