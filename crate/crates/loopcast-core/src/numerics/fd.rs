//! Central-difference gradient oracle. Independent of the tape: used to
//! cross-check every analytic gradient in the crate.

use crate::error::{Error, Result};

/// (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe);
        probe[i] = theta[i] - h;
        let fm = f(&probe);
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
