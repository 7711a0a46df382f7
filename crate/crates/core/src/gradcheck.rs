//! Central finite-difference checks for tape gradients.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Scalar function of several tape inputs.
pub type ScalarFn<'f> = dyn for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a> + 'f;

/// Compares analytic gradients of a scalar function of several inputs against
/// central differences. `coords` selects `(input, element)` pairs to probe.
pub fn check_gradients(
    inputs: &[Tensor],
    f: &ScalarFn<'_>,
    coords: &[(usize, usize)],
    step: f64,
) -> GradCheckReport {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(i, j)| grads.get(vars[i]).map(|g| g.data()[j]).unwrap_or(0.0))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (&(i, j), &a) in coords.iter().zip(&analytic) {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += step;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let err = rel_err(a, numeric, 1e-6);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}
