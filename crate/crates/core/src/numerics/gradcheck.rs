use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every coordinate of every parameter.
    pub max_rel_err: f64,
    /// Largest relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(param, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: (f64, f64),
    /// Coordinates whose gradient magnitude fell under [`REL_FLOOR`].
    pub below_floor: usize,
}

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central differences at
/// `DEFAULT_EPS` on an O(1) loss carry ~1e-11 of roundoff, so gradients
/// below this are compared absolutely (to `1e-4 * REL_FLOOR`).
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks reverse-mode gradients of a scalar function.
///
/// `f` builds the computation on a fresh tape from the given parameter
/// variables and returns the scalar output. Every coordinate of every
/// parameter is perturbed by `±eps`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_param: vec![0.0; params.len()],
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        below_floor: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[i], numeric);
            if analytic[p].data()[i].abs().max(numeric.abs()) < REL_FLOOR {
                report.below_floor += 1;
            }
            if err > report.per_param[p] {
                report.per_param[p] = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, i);
                report.worst_values = (analytic[p].data()[i], numeric);
            }
        }
    }
    Ok(report)
}
