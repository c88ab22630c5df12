//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mixed relative error `|a - b| / max(1, |a|, |b|)`.
///
/// Behaves as a relative error for gradients of magnitude above one and as
/// an absolute error near zero, where a pure ratio is meaningless.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Largest [`relative_error`] over all coordinates of `x`.
    pub max_rel_error: f64,
    /// Gradient from `backward()`.
    pub analytic: Vec<f64>,
    /// Central-difference estimate.
    pub numeric: Vec<f64>,
    /// [`Tape::kink_margin`] of the unperturbed evaluation.
    pub kink_margin: f64,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    Ok(v)
}

/// Compares `backward()` gradients of the scalar function `f` at `x` against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
///
/// Callers sampling random points should discard those whose
/// `kink_margin` is not comfortably larger than `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let kink_margin = tape.kink_margin();
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad_or_zeros(xv)
    } else {
        vec![0.0; x.numel()]
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone().into_data();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval_scalar(&f, &Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig - eps;
        let minus = eval_scalar(&f, &Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(FiniteDiffReport { max_rel_error, analytic, numeric, kink_margin })
}
