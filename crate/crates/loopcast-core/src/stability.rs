//! Linear error-dynamics laboratory: simulate e_t = (J - L) e_{t-1} + eps_t,
//! fit empirical growth rates, and evaluate the closed-loop disturbance
//! bound gamma / (1 - q).

use crate::error::{Error, Result};
use crate::numerics::{
    power_iteration_spectral_norm, spectral_norm, DenseMatrix, DEFAULT_POWER_ITERS,
    DEFAULT_POWER_TOL,
};
use crate::plant::{jacobian_wrt_last_patch, PatchContext, PlantModel};
use crate::numerics::ParamStore;
use crate::rng::{unit_sphere, SplitRng};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// How the per-step disturbance eps_t (with ||eps_t|| <= gamma) is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbancePolicy {
    /// eps_t aligned with the current error direction, at full magnitude —
    /// the adversarial case the bound must absorb.
    WorstCase,
    /// Independent uniform directions at full magnitude.
    IidSphere,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearErrorSystem {
    pub jacobian: DenseMatrix,
    /// Observer gain; `None` means open loop (L = 0).
    pub gain: Option<DenseMatrix>,
    /// Disturbance magnitude bound gamma >= 0.
    pub gamma: f64,
    pub policy: DisturbancePolicy,
    pub initial_error: Vec<f64>,
}

impl LinearErrorSystem {
    /// Effective transition matrix J - L.
    pub fn transition(&self) -> DenseMatrix {
        match &self.gain {
            Some(l) => self.jacobian.sub(l).expect("gain shaped like the jacobian"),
            None => self.jacobian.clone(),
        }
    }

    /// Contraction factor q = ||J - L||_2.
    pub fn contraction(&self) -> Result<f64> {
        spectral_norm(&self.transition(), DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorTrajectory {
    pub norms: Vec<f64>,
    /// Full error vectors, one per step (step 0 is the initial error).
    pub errors: Vec<Vec<f64>>,
}

/// Simulate the error recursion for `steps` transitions; the trajectory has
/// `steps + 1` entries including the initial error.
pub fn simulate_error_dynamics(
    system: &LinearErrorSystem,
    steps: usize,
    rng: &mut SplitRng,
) -> ErrorTrajectory {
    assert!(system.gamma >= 0.0);
    let a = system.transition();
    let dim = a.rows;
    assert_eq!(system.initial_error.len(), dim);
    let mut e = system.initial_error.clone();
    let mut errors = vec![e.clone()];
    let mut norms = vec![norm(&e)];
    for _ in 0..steps {
        let mut next = a.matvec(&e).expect("trajectory dim matches transition");
        let eps = match system.policy {
            DisturbancePolicy::Zero => vec![0.0; dim],
            DisturbancePolicy::IidSphere => {
                let u = unit_sphere(rng, dim);
                u.iter().map(|x| x * system.gamma).collect()
            }
            DisturbancePolicy::WorstCase => {
                // Push along the propagated error; fall back to a fixed axis
                // when the error is (numerically) zero.
                let n = norm(&next);
                if n > 1e-300 {
                    next.iter().map(|x| x / n * system.gamma).collect()
                } else {
                    let mut u = vec![0.0; dim];
                    u[0] = system.gamma;
                    u
                }
            }
        };
        for (x, d) in next.iter_mut().zip(&eps) {
            *x += d;
        }
        e = next;
        norms.push(norm(&e));
        errors.push(e.clone());
    }
    ErrorTrajectory { norms, errors }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares slope of log ||e_t|| against t over `[start, end)`; for an
/// exponential regime this is log of the growth rate per step.
pub fn fit_growth_rate(norms: &[f64], start: usize, end: usize) -> Result<f64> {
    if !(start < end && end <= norms.len() && end - start >= 2) {
        return Err(Error::GrowthFitUndefined(format!(
            "window [{start}, {end}) invalid for {} samples",
            norms.len()
        )));
    }
    let window = &norms[start..end];
    if window.iter().any(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(Error::GrowthFitUndefined(
            "norms must be positive and finite over the fit window".into(),
        ));
    }
    let n = window.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_y = window.iter().map(|v| v.ln()).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in window.iter().enumerate() {
        let dt = t as f64 - mean_t;
        num += dt * (v.ln() - mean_y);
        den += dt * dt;
    }
    Ok(num / den)
}

/// Steady-state bound gamma / (1 - q); undefined unless q < 1.
pub fn theoretical_bound(q: f64, gamma: f64) -> Result<f64> {
    if !(q >= 0.0 && q < 1.0) {
        return Err(Error::BoundUndefined(q));
    }
    assert!(gamma >= 0.0);
    Ok(gamma / (1.0 - q))
}

/// Partial-sum envelope q^t ||e_0|| + gamma (1 - q^t) / (1 - q), which
/// dominates ||e_t|| stepwise for q < 1.
pub fn stepwise_envelope(q: f64, gamma: f64, e0_norm: f64, steps: usize) -> Result<Vec<f64>> {
    if !(q >= 0.0 && q < 1.0) {
        return Err(Error::BoundUndefined(q));
    }
    Ok((0..=steps)
        .map(|t| {
            let qt = q.powi(t as i32);
            qt * e0_norm + gamma * (1.0 - qt) / (1.0 - q)
        })
        .collect())
}

/// Steps after which q^t < tol — past this, the transient has decayed to
/// numerical irrelevance.
pub fn burn_in_steps(q: f64, tol: f64) -> usize {
    assert!(q > 0.0 && q < 1.0 && tol > 0.0 && tol < 1.0);
    let mut t = (tol.ln() / q.ln()).ceil() as usize;
    // The log ratio can land exactly on an integer; nudge past the boundary.
    while q.powi(t as i32) >= tol {
        t += 1;
    }
    t
}

/// Gain L = J - q * I, which makes ||J - L||_2 exactly q.
pub fn search_stabilizing_gain(jacobian: &DenseMatrix, q: f64) -> Result<DenseMatrix> {
    assert_eq!(jacobian.rows, jacobian.cols);
    if !(q >= 0.0 && q < 1.0) {
        return Err(Error::BoundUndefined(q));
    }
    let mut scaled_identity = DenseMatrix::identity(jacobian.rows);
    for i in 0..jacobian.rows {
        *scaled_identity.at_mut(i, i) = q;
    }
    Ok(jacobian
        .sub(&scaled_identity)
        .expect("identity shaped like the jacobian"))
}

/// Spectral norm of the trained plant's one-step Jacobian w.r.t. the newest
/// context patch.
pub fn estimate_plant_jacobian_norm(
    plant: &PlantModel,
    store: &ParamStore,
    ctx: &PatchContext,
) -> Result<(DenseMatrix, f64)> {
    let jac = jacobian_wrt_last_patch(plant, store, ctx)?;
    let sigma = spectral_norm(&jac, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL)?;
    Ok((jac, sigma))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rho: f64,
    pub q: Option<f64>,
    pub gamma: f64,
    pub policy: DisturbancePolicy,
    pub steps: usize,
    pub fitted_growth_rate: Option<f64>,
    pub theoretical_bound: Option<f64>,
    pub max_error_norm: f64,
    pub final_error_norm: f64,
}

/// Run one system, fit the open-loop growth rate when the norms allow it,
/// and attach the closed-loop bound when q < 1.
pub fn run_stability_experiment(
    system: &LinearErrorSystem,
    steps: usize,
    rng: &mut SplitRng,
) -> Result<(StabilityReport, ErrorTrajectory)> {
    let traj = simulate_error_dynamics(system, steps, rng);
    let rho = spectral_norm(&system.jacobian, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL)?;
    let q = system.contraction()?;
    let fitted = fit_growth_rate(&traj.norms, 0, traj.norms.len()).ok();
    let bound = theoretical_bound(q, system.gamma).ok();
    let max_n = traj.norms.iter().cloned().fold(0.0f64, f64::max);
    let report = StabilityReport {
        rho,
        q: Some(q),
        gamma: system.gamma,
        policy: system.policy,
        steps,
        fitted_growth_rate: fitted,
        theoretical_bound: bound,
        max_error_norm: max_n,
        final_error_norm: *traj.norms.last().unwrap(),
    };
    Ok((report, traj))
}

/// Per-step CSV: step, error_norm, envelope (when defined).
pub fn write_trajectory_csv<W: Write>(
    mut out: W,
    traj: &ErrorTrajectory,
    envelope: Option<&[f64]>,
) -> Result<()> {
    writeln!(out, "step,error_norm,envelope")?;
    for (t, n) in traj.norms.iter().enumerate() {
        match envelope.and_then(|e| e.get(t)) {
            Some(b) => writeln!(out, "{t},{n},{b}")?,
            None => writeln!(out, "{t},{n},")?,
        }
    }
    Ok(())
}

/// Scaled orthogonal-ish testbed: J = V diag(s) V^-1 with a well-conditioned
/// random V, so the spectral radius is exactly max|s|.
pub fn diagonalizable_jacobian(scales: &[f64], rng: &mut SplitRng) -> DenseMatrix {
    let dim = scales.len();
    // Householder reflector => exactly orthogonal V, so V^-1 = V^T.
    let v = {
        let u = unit_sphere(rng, dim);
        let mut h = DenseMatrix::identity(dim);
        for r in 0..dim {
            for c in 0..dim {
                *h.at_mut(r, c) -= 2.0 * u[r] * u[c];
            }
        }
        h
    };
    let mut d = DenseMatrix::zeros(dim, dim);
    for (i, s) in scales.iter().enumerate() {
        *d.at_mut(i, i) = *s;
    }
    let mut vt = DenseMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            *vt.at_mut(r, c) = v.at(c, r);
        }
    }
    v.matmul(&d)
        .and_then(|vd| vd.matmul(&vt))
        .expect("square factors")
}

/// Spectral radius of a symmetric (or normal) matrix via power iteration on
/// the matrix itself; exact for the testbeds built here.
pub fn symmetric_spectral_radius(m: &DenseMatrix) -> Result<f64> {
    power_iteration_spectral_norm(
        |v: &[f64]| m.matvec(v).expect("square"),
        |v: &[f64]| m.matvec_transpose(v).expect("square"),
        m.rows,
        DEFAULT_POWER_ITERS,
        DEFAULT_POWER_TOL,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_open_loop_growth_matches_log_rho() {
        let system = LinearErrorSystem {
            jacobian: DenseMatrix::diagonal(&[1.3]),
            gain: None,
            gamma: 0.0,
            policy: DisturbancePolicy::Zero,
            initial_error: vec![1e-3],
        };
        let traj = simulate_error_dynamics(&system, 40, &mut seed_rng(0));
        let slope = fit_growth_rate(&traj.norms, 0, traj.norms.len()).unwrap();
        assert_abs_diff_eq!(slope, 1.3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn growth_fit_rejects_degenerate_windows() {
        assert!(fit_growth_rate(&[1.0, 2.0], 0, 1).is_err());
        assert!(fit_growth_rate(&[1.0, 0.0, 2.0], 0, 3).is_err());
        assert!(fit_growth_rate(&[1.0, 2.0], 0, 5).is_err());
    }

    #[test]
    fn bound_requires_contraction() {
        assert!(theoretical_bound(1.0, 0.1).is_err());
        assert!(theoretical_bound(1.7, 0.1).is_err());
        assert_abs_diff_eq!(theoretical_bound(0.5, 0.1).unwrap(), 0.2);
    }

    #[test]
    fn scalar_worst_case_saturates_bound() {
        // e_{t+1} = q e_t + gamma exactly; limit is gamma / (1 - q).
        let (q, gamma) = (0.7, 0.05);
        let system = LinearErrorSystem {
            jacobian: DenseMatrix::diagonal(&[q]),
            gain: None,
            gamma,
            policy: DisturbancePolicy::WorstCase,
            initial_error: vec![0.0],
        };
        let traj = simulate_error_dynamics(&system, 400, &mut seed_rng(0));
        let bound = theoretical_bound(q, gamma).unwrap();
        for n in &traj.norms {
            assert!(*n <= bound + 1e-12);
        }
        assert!(traj.norms.last().unwrap() > &(bound * 0.999999));
    }

    #[test]
    fn envelope_dominates_worst_case_trajectory() {
        let (q, gamma) = (0.6, 0.2);
        let system = LinearErrorSystem {
            jacobian: DenseMatrix::diagonal(&[q, q]),
            gain: None,
            gamma,
            policy: DisturbancePolicy::WorstCase,
            initial_error: vec![2.0, 0.0],
        };
        let traj = simulate_error_dynamics(&system, 100, &mut seed_rng(0));
        let env = stepwise_envelope(q, gamma, 2.0, 100).unwrap();
        for (n, b) in traj.norms.iter().zip(&env) {
            assert!(n <= &(b + 1e-9), "{n} > {b}");
        }
        // For a scalar-like normal system the worst case meets the envelope.
        assert_abs_diff_eq!(traj.norms[100], env[100], epsilon = 1e-9);
    }

    #[test]
    fn stabilizing_gain_hits_target_contraction() {
        let jac = diagonalizable_jacobian(&[1.4, 0.7, 0.3, 0.1], &mut seed_rng(2));
        let gain = search_stabilizing_gain(&jac, 0.5).unwrap();
        let system = LinearErrorSystem {
            jacobian: jac,
            gain: Some(gain),
            gamma: 0.0,
            policy: DisturbancePolicy::Zero,
            initial_error: vec![1.0, 1.0, 1.0, 1.0],
        };
        assert_abs_diff_eq!(system.contraction().unwrap(), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn diagonalizable_testbed_has_prescribed_radius() {
        let scales = [1.25, 0.6, 0.3, 0.1];
        let jac = diagonalizable_jacobian(&scales, &mut seed_rng(7));
        // Orthogonal similarity keeps the spectrum, and with an orthogonal V
        // the matrix is normal, so spectral norm == spectral radius.
        let s = spectral_norm(&jac, 200, 1e-12).unwrap();
        assert_abs_diff_eq!(s, 1.25, epsilon = 1e-9);
    }

    #[test]
    fn burn_in_matches_direct_search() {
        for q in [0.1, 0.5, 0.9] {
            let t = burn_in_steps(q, 1e-9);
            assert!(q.powi(t as i32) < 1e-9);
            // One step earlier the transient is still above (or at) the
            // tolerance, so t is minimal.
            assert!(q.powi(t as i32 - 1) >= 1e-9);
        }
    }

    #[test]
    fn trajectory_csv_shape() {
        let traj = ErrorTrajectory {
            norms: vec![1.0, 0.5],
            errors: vec![vec![1.0], vec![0.5]],
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, Some(&[2.0, 1.5])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,error_norm,envelope"));
    }
}
