//! Central finite-difference verification of analytic gradients.

use super::matrix::Matrix;
use crate::{DfaError, Result};

/// Compares the analytic gradient returned by `loss_and_grad` with central
/// differences at every parameter entry and returns
/// `max |analytic - numeric| / max(1, |numeric|)`.
///
/// The loss is evaluated twice at the unperturbed point first; any bitwise
/// difference means the function is not deterministic and the comparison
/// would be meaningless.
pub fn grad_check<F>(params: &[Matrix], epsilon: f64, mut loss_and_grad: F) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(DfaError::InvalidArgument(format!(
            "finite-difference step {epsilon} outside (0, 1e-2]"
        )));
    }
    let (first, analytic) = loss_and_grad(params)?;
    let (second, _) = loss_and_grad(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(DfaError::NonDeterministic { first, second });
    }
    if analytic.len() != params.len() {
        return Err(DfaError::shape(
            "grad_check",
            format!("{} gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    for (g, p) in analytic.iter().zip(params) {
        g.check_same_shape(p, "grad_check")?;
    }

    let mut work = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let base = p.as_slice()[j];
            work[pi].as_mut_slice()[j] = base + epsilon;
            let (plus, _) = loss_and_grad(&work)?;
            work[pi].as_mut_slice()[j] = base - epsilon;
            let (minus, _) = loss_and_grad(&work)?;
            work[pi].as_mut_slice()[j] = base;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[pi].as_slice()[j] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(DfaError::NonFinite("grad_check difference".into()));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
