use std::sync::Arc;

use super::{Bindings, Gradients, GraphError, Tensor};

/// Gradients below this magnitude are compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on every coordinate of every parameter.
///
/// `loss` maps bindings to the loss value and its analytic gradients. It
/// must be deterministic; a loss that returns different values for the same
/// parameters is rejected before any coordinate is checked.
pub fn finite_diff_check<F, E>(
    mut loss: F,
    params: &Bindings,
    eps: f64,
) -> Result<FiniteDiffReport, E>
where
    F: FnMut(&Bindings) -> Result<(f64, Gradients), E>,
    E: From<GraphError>,
{
    if !(eps > 0.0) {
        return Err(GraphError::BadStep(eps).into());
    }
    let (base, analytic) = loss(params)?;
    let (again, _) = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(GraphError::NonDeterministic(base, again).into());
    }

    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.len() {
            let mut probe = params.clone();
            let numeric = {
                let mut plus = (**value).clone();
                plus.data_mut()[i] += eps;
                probe.insert(name.clone(), Arc::new(plus));
                let (f_plus, _) = loss(&probe)?;
                let mut minus = (**value).clone();
                minus.data_mut()[i] -= eps;
                probe.insert(name.clone(), Arc::new(minus));
                let (f_minus, _) = loss(&probe)?;
                (f_plus - f_minus) / (2.0 * eps)
            };
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
