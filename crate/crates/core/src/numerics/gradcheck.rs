//! Central-difference verification of reverse-mode gradients.

use super::array::DiffArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Checks `f` with respect to a single input; returns the max relative error.
pub fn grad_check<F>(f: F, x: &DiffArray<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
        .map(|r| r.max_relative_error)
}

/// Checks `f` with respect to every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[DiffArray<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let eval = |arrays: &[DiffArray<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = arrays.iter().map(|a| tape.leaf(a)).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs
        .iter()
        .map(|a| tape.variable(a.shape(), a.data().to_vec()))
        .collect();
    let out = f(&tape, &vars);
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::CheckFailed(format!(
            "function value is not finite ({value})"
        )));
    }
    let grads = tape.backward(out);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<DiffArray<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..analytic.len() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::CheckFailed(format!(
                    "non-finite central difference at input {which}, coordinate {i}"
                )));
            }
            let err = relative_error(analytic[i], numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}
