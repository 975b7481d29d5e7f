//! Gradient-wiring checks shared by the regular tests and the acceptance run.

use vapaad::layers::Mode;
use vapaad::model::{InstructorModel, VapaadConfig, VapaadModel};
use vapaad::training::{instructor_objective, minimax_loss, reconstruction_loss, vapaad_objective};
use vapaad::{Tape, Tensor, Var};

use super::{rng, uniform};

pub struct Isolation {
    /// Generator elements with a nonzero gradient from the instructor loss.
    pub generator_leaks: usize,
    /// Instructor elements with a nonzero gradient from the generator loss.
    pub instructor_leaks: usize,
    /// Sanity: each loss does reach its own side.
    pub instructor_reached: bool,
    pub generator_reached: bool,
}

fn nonzero(tape: &Tape<f64>, vars: &[Var<'_, f64>]) -> usize {
    vars.iter()
        .filter_map(|&v| tape.grad(v))
        .map(|g| g.data().iter().filter(|&&x| x != 0.0).count())
        .sum()
}

fn small_config() -> VapaadConfig {
    VapaadConfig {
        frame_size: [8, 8],
        blocks: 2,
        filters: vec![3, 3],
        kernels: vec![3, 1],
        ..VapaadConfig::default()
    }
}

/// Records both adversarial objectives on one tape, then backpropagates
/// each alone and counts the gradient that reaches the other player.
pub fn adversarial_isolation(seed: u64) -> Isolation {
    let mut r = rng(seed);
    let model = VapaadModel::<f64>::build(small_config(), &mut r).unwrap();
    let inst = InstructorModel::<f64>::build(&mut r);
    let x = uniform(&[2, 4, 1, 8, 8], 0.0, 1.0, seed + 1);
    let y = uniform(&[2, 4, 1, 8, 8], 0.0, 1.0, seed + 2);

    let tape = Tape::new();
    let fwd = model
        .forward_on_tape(&tape, tape.constant(x), Mode::Train, &mut rng(seed + 3))
        .unwrap();
    let (inst_loss, inst_params) =
        instructor_objective(&tape, &inst, tape.constant(y), fwd.output).unwrap();
    let gen_loss = vapaad_objective(&tape, &inst, fwd.output).unwrap();

    tape.backward(inst_loss).unwrap();
    let generator_leaks = nonzero(&tape, &fwd.params);
    let instructor_reached = nonzero(&tape, &inst_params) > 0;
    tape.zero_grad();
    tape.backward(gen_loss).unwrap();
    let instructor_leaks = nonzero(&tape, &inst_params);
    let generator_reached = nonzero(&tape, &fwd.params) > 0;
    Isolation {
        generator_leaks,
        instructor_leaks,
        instructor_reached,
        generator_reached,
    }
}

/// The minimax value when the instructor scores every sequence 0.5: an
/// all-zero instructor outputs σ(0) for real and generated batches alike.
pub fn minimax_at_half() -> f64 {
    let inst = InstructorModel::<f64>::zeros();
    let real = uniform(&[3, 4, 1, 8, 8], 0.0, 1.0, 1);
    let fake = uniform(&[3, 4, 1, 8, 8], 0.0, 1.0, 2);
    let tape = Tape::no_grad();
    let r = tape.constant(inst.score(&real).unwrap());
    let f = tape.constant(inst.score(&fake).unwrap());
    let value = minimax_loss(r, f).unwrap().value().item().unwrap();
    value
}

pub struct StopGrad {
    /// Nonzero `W_q` / `W_k` gradient elements over all blocks.
    pub score_path_nonzero: usize,
    pub score_path_tensors: usize,
    /// Nonzero elements among all other parameters, and their total.
    pub other_nonzero: usize,
    pub other_total: usize,
}

impl StopGrad {
    pub fn other_fraction(&self) -> f64 {
        self.other_nonzero as f64 / self.other_total as f64
    }
}

/// Reconstruction-loss gradients of a three-block stop-gradient model on a
/// random batch.
pub fn stop_grad(seed: u64) -> StopGrad {
    let cfg = VapaadConfig {
        frame_size: [16, 16],
        filters: vec![8, 8, 8],
        stop_grad: true,
        ..VapaadConfig::default()
    };
    let mut r = rng(seed);
    let model = VapaadModel::<f64>::build(cfg, &mut r).unwrap();
    let x = uniform(&[2, 5, 1, 16, 16], 0.0, 1.0, seed + 1);
    let y = uniform(&[2, 5, 1, 16, 16], 0.0, 1.0, seed + 2).map(|v| (v > 0.7) as u8 as f64);
    let tape = Tape::new();
    let fwd = model
        .forward_on_tape(&tape, tape.constant(x), Mode::Train, &mut rng(seed + 3))
        .unwrap();
    let loss = reconstruction_loss(fwd.output, tape.constant(y)).unwrap();
    tape.backward(loss).unwrap();
    let mut out = StopGrad {
        score_path_nonzero: 0,
        score_path_tensors: 0,
        other_nonzero: 0,
        other_total: 0,
    };
    for ((name, t), v) in model.named_params().into_iter().zip(&fwd.params) {
        let g = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let nz = g.data().iter().filter(|&&x| x != 0.0).count();
        if name.ends_with("attention.w_q") || name.ends_with("attention.w_k") {
            out.score_path_nonzero += nz;
            out.score_path_tensors += 1;
        } else {
            out.other_nonzero += nz;
            out.other_total += g.numel();
        }
    }
    out
}
