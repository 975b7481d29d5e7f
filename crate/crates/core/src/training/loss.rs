//! Adversarial and reconstruction objectives.
//!
//! Probabilities are clamped to `[ε, 1 − ε]` with `ε = 1e-7` before any
//! logarithm; the clamp lives here and not in the `log` primitive.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::InstructorModel;
use crate::scalar::lit;
use crate::Scalar;

pub const LOG_EPS: f64 = 1e-7;

fn clamp_probs<'t, T: Scalar>(p: Var<'t, T>) -> Result<Var<'t, T>> {
    p.clamp(lit(LOG_EPS), lit(1.0 - LOG_EPS))
}

fn check_scores<T: Scalar>(s: Var<'_, T>, what: &str) -> Result<()> {
    if s.value()
        .data()
        .iter()
        .any(|&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::invalid(format!("{what} scores must lie in [0, 1]")));
    }
    Ok(())
}

/// `mean log I(x) + mean log(1 − I(V(x)))`; never positive.
pub fn minimax_loss<'t, T: Scalar>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_scores(real, "real")?;
    check_scores(fake, "fake")?;
    let real_term = clamp_probs(real)?.log()?.mean()?;
    let fake_term = clamp_probs(fake)?.one_minus()?.log()?.mean()?;
    real_term.add(fake_term)
}

/// The instructor descends the negated minimax value.
pub fn instructor_loss<'t, T: Scalar>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    minimax_loss(real, fake)?.neg()
}

/// `mean log(1 − I(V(x)))`, which the generator minimizes.
pub fn vapaad_loss<'t, T: Scalar>(fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_scores(fake, "fake")?;
    clamp_probs(fake)?.one_minus()?.log()?.mean()
}

/// Instructor objective on a real and a generated batch. Both enter
/// detached, so no gradient can reach the generator; the returned handles are
/// the instructor parameters.
pub fn instructor_objective<'t, T: Scalar>(
    tape: &'t Tape<T>,
    inst: &InstructorModel<T>,
    real_batch: Var<'t, T>,
    fake_batch: Var<'t, T>,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let shape = real_batch.shape();
    if shape != fake_batch.shape() || shape.is_empty() {
        return Err(Error::shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            shape,
            fake_batch.shape()
        )));
    }
    // one pass over [real; fake] so each parameter has a single tape handle
    let b = shape[0];
    let mut both_shape = shape.clone();
    both_shape[0] = 2 * b;
    let both = Var::stack0(&[real_batch.detach(), fake_batch.detach()])?.reshape(&both_shape)?;
    let (scores, params) = inst.score_on_tape(tape, both)?;
    let loss = instructor_loss(scores.slice0(0, b)?, scores.slice0(b, b)?)?;
    Ok((loss, params))
}

/// Generator objective on generated sequences, with the instructor frozen.
pub fn vapaad_objective<'t, T: Scalar>(
    tape: &'t Tape<T>,
    inst: &InstructorModel<T>,
    generated: Var<'t, T>,
) -> Result<Var<'t, T>> {
    vapaad_loss(inst.score_frozen(tape, generated)?)
}

/// Mean per-pixel binary cross-entropy.
pub fn reconstruction_loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let p = clamp_probs(pred)?;
    let pos = target.mul(p.log()?)?;
    let neg = target.one_minus()?.mul(p.one_minus()?.log()?)?;
    pos.add(neg)?.mean()?.neg()
}
