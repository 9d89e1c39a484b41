//! Regularizing transform: the resolvent fixed point `u`, the map `θ = id + u`, and the
//! Hessian-scale function of a Dini modulus.

mod grid;
mod solver;

pub use grid::{LatticeSpec, UField, UGrid, UValue, MAX_LATTICE_MODES};
pub use solver::{select_lambda, solve_u, GammaOperator, LambdaAttempt, LambdaSelection, USolution, USolverConfig};

use crate::coefficients::DiniModulus;
use crate::error::{LabError, Result};
use crate::quadrature::integrate_from_zero;
use crate::spectral::ModeVector;

/// `θ_s(x) = x + u_s(x)`.
pub fn theta_apply(u: &UField, s: f64, x: &[f64]) -> ModeVector {
    let mut buf = vec![0.0; u.stride()];
    let mut out = x.to_vec();
    theta_apply_into(u, s, x, &mut buf, &mut out);
    out.into()
}

pub(crate) fn theta_apply_into(u: &UField, s: f64, x: &[f64], buf: &mut [f64], out: &mut [f64]) {
    u.eval_into(s, x, buf);
    out.copy_from_slice(x);
    for n in 0..u.value_modes {
        out[n] += buf[n];
    }
}

/// Maximum number of fixed-point iterations in [`theta_invert`].
pub const THETA_MAX_ITERS: usize = 200;

/// `θ_s^{-1}(y)` by the iteration `x ← y − u_s(x)`.
pub fn theta_invert(u: &UField, s: f64, y: &[f64], tol: f64) -> Result<ModeVector> {
    let mut buf = vec![0.0; u.stride()];
    let mut x = y.to_vec();
    theta_invert_into(u, s, y, tol, &mut buf, &mut x)?;
    Ok(x.into())
}

/// In-place inverse; `x` must hold the starting guess (usually `y`) on entry.
pub(crate) fn theta_invert_into(u: &UField, s: f64, y: &[f64], tol: f64, buf: &mut [f64], x: &mut [f64]) -> Result<usize> {
    let r = u.value_modes;
    for it in 0..THETA_MAX_ITERS {
        u.eval_into(s, x, buf);
        let mut change = 0.0f64;
        for n in 0..r {
            let next = y[n] - buf[n];
            change = change.max((next - x[n]).abs());
            x[n] = next;
        }
        if change <= tol {
            return Ok(it + 1);
        }
    }
    Err(LabError::NoConvergence(format!("θ inverse did not reach tolerance {tol} in {THETA_MAX_ITERS} iterations")))
}

/// `c₁ ∫_0^T e^{-λs} φ(c₂ s^{ε/2}) / s ds`.
pub fn dphi_lambda(phi: &DiniModulus, lambda: f64, horizon: f64, eps: f64, c1: f64, c2: f64) -> Result<f64> {
    if horizon <= 0.0 {
        return Ok(0.0);
    }
    let r = integrate_from_zero(|s| (-lambda * s).exp() * phi.eval(c2 * s.powf(0.5 * eps)) / s, horizon, 160);
    if !r.convergent {
        return Err(LabError::DivergentModulus { trace: r.partial_sums });
    }
    Ok(c1 * r.value)
}
