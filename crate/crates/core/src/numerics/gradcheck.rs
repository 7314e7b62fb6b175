use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`
    /// over the parameter matrices.
    pub max_relative_error: f64,
    /// Index of the parameter matrix attaining the worst error.
    pub worst_parameter: usize,
    pub coordinates_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate.
///
/// `f` receives a fresh tape with `params` bound as leaves (in order) and
/// must return a 1×1 node.
pub fn finite_difference_check<F>(params: &[Matrix<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |values: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: 0,
        coordinates_checked: 0,
    };
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(params[p].rows(), params[p].cols()));
        let mut numeric = Matrix::zeros(params[p].rows(), params[p].cols());
        for idx in 0..params[p].len() {
            let orig = params[p].as_slice()[idx];
            work[p].as_mut_slice()[idx] = orig + step;
            let plus = eval(&work)?;
            work[p].as_mut_slice()[idx] = orig - step;
            let minus = eval(&work)?;
            work[p].as_mut_slice()[idx] = orig;
            numeric.as_mut_slice()[idx] = (plus - minus) / (2.0 * step);
            report.coordinates_checked += 1;
        }
        let scale = analytic.max_abs().max(numeric.max_abs());
        let err = if scale == 0.0 {
            0.0
        } else {
            analytic.max_abs_diff(&numeric).unwrap_or(f64::INFINITY) / scale
        };
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = p;
        }
    }
    Ok(report)
}

fn scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let m = tape.value(v);
    if m.shape() != (1, 1) {
        return Err(Error::dim("finite_difference_check (scalar output)", (1, 1), m.shape()));
    }
    let x = m.get(0, 0);
    if !x.is_finite() {
        return Err(Error::Numeric(format!("function value {x} is not finite")));
    }
    Ok(x)
}
