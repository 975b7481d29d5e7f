//! Finite-difference checks of every differentiable layer on small random
//! shapes, in f64.

use rand::Rng;
use vapaad::gradcheck::{finite_diff_check, GradCheckReport};
use vapaad::layers::{
    batchnorm, conv3d_head, convlstm_step, self_attention, AttentionParams, BatchNormParams,
    BoundAttention, BoundConvLstm, ConvLstmParams, ConvLstmState, Mode,
};
use vapaad::model::{InstructorModel, VapaadConfig, VapaadModel};
use vapaad::training::{reconstruction_loss, vapaad_objective};
use vapaad::{Padding, Result, Tape, Tensor, Var};

use super::{rng, uniform};

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

/// Reduces `out` to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = uniform(&out.shape(), -1.0, 1.0, seed);
    out.mul(tape.constant(w))?.sum()
}

/// Random `(B, C, H, W)` with `B, C ≤ 2` and sides in `3..=6`.
fn small_shape(r: &mut impl Rng) -> [usize; 4] {
    [
        r.gen_range(1..=2),
        r.gen_range(1..=2),
        r.gen_range(3..=6),
        r.gen_range(3..=6),
    ]
}

pub fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let [b, c, h, w] = small_shape(&mut r);
    let o = r.gen_range(1..=2);
    let k = [1, 3][r.gen_range(0..2)];
    let padding = if r.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    };
    let params = [
        uniform(&[b, c, h, w], -1.0, 1.0, seed + 1),
        uniform(&[o, c, k, k], -0.5, 0.5, seed + 2),
        uniform(&[o], -0.5, 0.5, seed + 3),
    ];
    finite_diff_check(
        |tape, v| project(tape, v[0].conv2d(v[1], Some(v[2]), padding)?, seed),
        &params,
        H,
        LAYER_TOL,
    )
}

pub fn convlstm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let [b, c, h, w] = small_shape(&mut r);
    let f = r.gen_range(1..=2);
    let k = [1, 3][r.gen_range(0..2)];
    let cell = ConvLstmParams::<f64>::glorot(c, f, k, &mut r);
    let mut params: Vec<Tensor<f64>> = cell
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    // the biases start at zero; move them off it
    for (i, p) in params.iter_mut().enumerate().skip(8) {
        *p = uniform(p.shape(), -0.5, 0.5, seed + 10 + i as u64);
    }
    params.push(uniform(&[b, c, h, w], -1.0, 1.0, seed + 1));
    params.push(uniform(&[b, f, h, w], -1.0, 1.0, seed + 2));
    params.push(uniform(&[b, f, h, w], -1.0, 1.0, seed + 3));
    finite_diff_check(
        |tape, v| {
            let p = BoundConvLstm {
                w_xi: v[0],
                w_xf: v[1],
                w_xc: v[2],
                w_xo: v[3],
                w_hi: v[4],
                w_hf: v[5],
                w_hc: v[6],
                w_ho: v[7],
                b_i: v[8],
                b_f: v[9],
                b_c: v[10],
                b_o: v[11],
            };
            let state = ConvLstmState { h: v[13], c: v[14] };
            let next = convlstm_step(v[12], &state, &p)?;
            project(tape, next.h, seed)?.add(project(tape, next.c, seed + 99)?)
        },
        &params,
        H,
        LAYER_TOL,
    )
}

pub fn batchnorm_check(seed: u64, mode: Mode) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let [b, c, h, w] = small_shape(&mut r);
    let mut norm = BatchNormParams::<f64>::new(c);
    norm.init_running_stats();
    norm.running_mean = Some(uniform(&[c], -0.5, 0.5, seed + 4));
    norm.running_var = Some(uniform(&[c], 0.5, 1.5, seed + 5));
    let params = [
        uniform(&[b, c, h, w], -1.0, 1.0, seed + 1),
        uniform(&[c], 0.5, 1.5, seed + 2),
        uniform(&[c], -0.5, 0.5, seed + 3),
    ];
    finite_diff_check(
        |tape, v| {
            let mut bound = norm.bind(tape);
            bound.gamma = v[1];
            bound.beta = v[2];
            let (out, _) = batchnorm(v[0], &bound, mode)?;
            project(tape, out, seed)
        },
        &params,
        H,
        LAYER_TOL,
    )
}

pub fn attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let [b, c, h, w] = small_shape(&mut r);
    let p = AttentionParams::<f64>::glorot(c, &mut r);
    let params = [
        uniform(&[b, c, h, w], -1.0, 1.0, seed + 1),
        p.w_q.clone(),
        p.w_k.clone(),
        p.w_v.clone(),
    ];
    finite_diff_check(
        |tape, v| {
            let bound = BoundAttention {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                stop_qk_gradient: false,
            };
            project(tape, self_attention(v[0], &bound)?, seed)
        },
        &params,
        H,
        LAYER_TOL,
    )
}

pub fn head(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let [b, c, h, w] = small_shape(&mut r);
    let t = 2;
    let params = [
        uniform(&[t, b, c, h, w], -1.0, 1.0, seed + 1),
        uniform(&[1, c, 3, 3, 3], -0.3, 0.3, seed + 2),
        uniform(&[1], -0.3, 0.3, seed + 3),
    ];
    finite_diff_check(
        |tape, v| project(tape, conv3d_head(v[0], v[1], v[2])?, seed),
        &params,
        H,
        LAYER_TOL,
    )
}

pub fn tiny_model_config() -> VapaadConfig {
    VapaadConfig {
        frame_size: [6, 6],
        blocks: 2,
        filters: vec![2, 2],
        kernels: vec![3, 1],
        ..VapaadConfig::default()
    }
}

/// Train-mode loss of a two-block model on a `(2, 3, 1, 6, 6)` batch with
/// respect to every generator parameter. `adversarial_weight > 0` adds the
/// generator's adversarial term against a fixed instructor.
pub fn end_to_end(seed: u64, adversarial_weight: f64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut model = VapaadModel::<f64>::build(tiny_model_config(), &mut r)?;
    for (_, p) in model.named_params_mut() {
        for v in p.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let inst = InstructorModel::<f64>::build(&mut r);
    let x = uniform(&[2, 3, 1, 6, 6], 0.0, 1.0, seed + 1);
    let y = uniform(&[2, 3, 1, 6, 6], 0.0, 1.0, seed + 2);
    let params: Vec<Tensor<f64>> = model
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    finite_diff_check(
        |tape, v| {
            let fwd = model.forward_with_params(
                tape,
                v,
                tape.constant(x.clone()),
                Mode::Train,
                &mut rng(seed + 3),
            )?;
            let loss = reconstruction_loss(fwd.output, tape.constant(y.clone()))?;
            if adversarial_weight > 0.0 {
                let adv = vapaad_objective(tape, &inst, fwd.output)?;
                loss.add(adv.scale(adversarial_weight)?)
            } else {
                Ok(loss)
            }
        },
        &params,
        H,
        END_TO_END_TOL,
    )
}

/// Every check of the suite, labelled.
pub fn suite() -> Vec<(&'static str, Result<GradCheckReport>)> {
    let mut out = Vec::new();
    for seed in [11, 12, 13] {
        out.push(("conv2d", conv2d(seed)));
        out.push(("convlstm_step", convlstm(seed)));
        out.push(("batchnorm (train)", batchnorm_check(seed, Mode::Train)));
        out.push(("batchnorm (infer)", batchnorm_check(seed, Mode::Infer)));
        out.push(("self_attention", attention(seed)));
        out.push(("conv3d_head", head(seed)));
    }
    out.push(("end-to-end reconstruction", end_to_end(21, 0.0)));
    out.push(("end-to-end combined", end_to_end(22, 0.5)));
    out
}
