use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    out.value().item()
}

/// Compare reverse-mode gradients of scalar `f` against central differences
/// `(f(x + h e) - f(x - h e)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-5..=1e-2).contains(&step) {
        return Err(Error::param(format!(
            "finite-difference step {step} outside [1e-5, 1e-2]"
        )));
    }
    if point.is_empty() {
        return Err(Error::param("grad_check needs at least one input"));
    }

    let first = evaluate(&f, point)?;
    let second = evaluate(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(Var::grad).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tolerance: tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for idx in 0..point[input].len() {
            let x0 = point[input].data()[idx];
            probe[input].data_mut()[idx] = x0 + step;
            let plus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = x0 - step;
            let minus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (input, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
