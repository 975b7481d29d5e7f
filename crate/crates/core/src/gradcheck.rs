//! Central finite-difference verification of tape gradients (64-bit only).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1, |a|, |n|)` over every parameter element.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor of one, so that gradients near zero
/// are compared absolutely.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&tape, &vars)?;
    let v = out.value().item()?;
    Ok(v)
}

/// Compares tape gradients of the scalar `f(params)` with
/// `(f(θ + h) - f(θ - h)) / 2h` element by element.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(h > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid("finite_diff_check needs h > 0 and tol > 0"));
    }
    let base1 = eval(&f, params)?;
    let base2 = eval(&f, params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {base1} vs {base2}"
        )));
    }

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| {
                v.grad()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let err = rel_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
