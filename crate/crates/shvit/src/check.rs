//! Finite-difference gradient checking.
//!
//! The comparison metric is `|a - n| / max(|a|, |n|, FLOOR)`. The floor keeps
//! near-zero gradients from inflating the ratio while still bounding their
//! absolute discrepancy by `tol * FLOOR`.

use crate::params::ParamSet;
use crate::tensor::TensorResult;

const FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Central finite difference of a scalar function at `x0`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Central finite differences of `loss` with respect to every element of
/// every parameter. `loss` must be a pure function of the parameter values.
pub fn finite_diff_param_grads(
    params: &mut ParamSet,
    h: f64,
    loss: &mut dyn FnMut(&ParamSet) -> TensorResult<f64>,
) -> TensorResult<Vec<(String, Vec<f64>)>> {
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let name = params.name_at(i).to_string();
        let n = params.tensor_at(i).numel();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let original = params.tensor_at(i).data()[j];
            params.tensor_at_mut(i).data_mut()[j] = original + h;
            let plus = loss(params)?;
            params.tensor_at_mut(i).data_mut()[j] = original - h;
            let minus = loss(params)?;
            params.tensor_at_mut(i).data_mut()[j] = original;
            g[j] = (plus - minus) / (2.0 * h);
        }
        grads.push((name, g));
    }
    Ok(grads)
}

/// Compares analytic gradients stored on `params` (after a backward/harvest)
/// against finite differences of `loss`.
pub fn compare_param_grads(
    params: &mut ParamSet,
    h: f64,
    loss: &mut dyn FnMut(&ParamSet) -> TensorResult<f64>,
) -> TensorResult<GradCheckReport> {
    let numeric = finite_diff_param_grads(params, h, loss)?;
    let mut report = GradCheckReport {
        max_rel: 0.0,
        checked: 0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (name, num) in &numeric {
        let analytic = params
            .get(name)
            .and_then(|t| t.grad())
            .ok_or_else(|| crate::tensor::TensorError::MissingGradient { name: name.clone() })?;
        for (j, (&a, &n)) in analytic.iter().zip(num).enumerate() {
            let e = rel_error(a, n);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst_param = name.clone();
                report.worst_index = j;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}
