//! Central finite differences, used as an independent oracle for every
//! hand-written backward pass.

use super::Tensor;
use crate::error::{Error, Result};

/// Default step for the central-difference oracle.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` of a
/// scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite function value at element {i}: f(+h) = {up}, f(-h) = {down}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
