//! Largest-singular-value estimation by power iteration on A^T A.

use crate::error::{Error, Result};
use crate::numerics::matrix::DenseMatrix;
use crate::rng::{seed_rng, unit_sphere};

pub const DEFAULT_POWER_ITERS: usize = 50;
pub const DEFAULT_POWER_TOL: f64 = 1e-6;

/// Estimate the spectral norm of the linear map given by `apply` / `apply_transpose`.
///
/// Starts from a fixed pseudorandom unit vector (deterministic in `dim`), so
/// repeated calls agree bit-for-bit. Returns 0 for the zero operator.
pub fn power_iteration_spectral_norm<FA, FT>(
    apply: FA,
    apply_transpose: FT,
    dim: usize,
    iters: usize,
    tol: f64,
) -> Result<f64>
where
    FA: Fn(&[f64]) -> Vec<f64>,
    FT: Fn(&[f64]) -> Vec<f64>,
{
    assert!(iters >= 1 && dim >= 1);
    let mut rng = seed_rng(0x7031_u64 ^ dim as u64);
    let mut v = unit_sphere(&mut rng, dim);
    let mut sigma = 0.0;
    for it in 0..iters {
        let av = apply(&v);
        check_finite(&av, it)?;
        let new_sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if new_sigma == 0.0 {
            return Ok(0.0);
        }
        let z = apply_transpose(&av);
        check_finite(&z, it)?;
        let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if zn == 0.0 {
            return Ok(new_sigma);
        }
        for (vi, zi) in v.iter_mut().zip(&z) {
            *vi = zi / zn;
        }
        if (new_sigma - sigma).abs() < tol {
            return Ok(new_sigma);
        }
        sigma = new_sigma;
    }
    Ok(sigma)
}

fn check_finite(v: &[f64], iter: usize) -> Result<()> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("power iteration step {iter}"),
            index,
        });
    }
    Ok(())
}

/// Spectral norm of an explicit matrix.
pub fn spectral_norm(m: &DenseMatrix, iters: usize, tol: f64) -> Result<f64> {
    power_iteration_spectral_norm(
        |v| m.matvec(v).expect("dim checked"),
        |v| m.matvec_transpose(v).expect("dim checked"),
        m.cols.max(1),
        iters,
        tol,
    )
}
