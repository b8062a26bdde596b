use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Array, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error within each parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares autodiff gradients of the scalar program `f` against central
/// finite differences for every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Array], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("grad_check parameters must be finite".into()));
    }
    let eval = |ps: &[Array]| -> Result<f64> {
        let leaves: Vec<Tensor> = ps.iter().map(|p| p.to_tensor(false)).collect();
        let out = f(&leaves)?;
        if out.len() != 1 {
            return Err(Error::Contract(format!("grad_check program returned shape {:?}", out.shape())));
        }
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("program output {v} is not finite")));
        }
        Ok(v)
    };

    let leaves: Vec<Tensor> = params.iter().map(|p| p.to_tensor(true)).collect();
    let root = f(&leaves)?;
    if !root.item().is_finite() {
        return Err(Error::Numeric("program output is not finite".into()));
    }
    root.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for ci in 0..grad.len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data[ci] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad[ci], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance,
        pass: max_rel_error <= tolerance,
    })
}
