//! Truncated diagonal operator `A e_n = -λ_n e_n` and its semigroup.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, LabError, Result};

/// Coordinates of a state in the eigenbasis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeVector(pub Vec<f64>);

impl ModeVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn unit(dim: usize, mode: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[mode] = 1.0;
        v
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ModeVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModeVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModeVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// How the eigenvalues are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenLaw {
    /// `λ_n = (nπ)^2`, the Dirichlet Laplacian on the unit interval.
    DirichletLaplacian,
    /// `λ_n = scale · n^exponent`.
    Power { scale: f64, exponent: f64 },
    /// Explicit list; its length fixes the dimension.
    Explicit(Vec<f64>),
}

impl EigenLaw {
    fn growth(&self) -> Option<(f64, f64)> {
        match self {
            EigenLaw::DirichletLaplacian => Some((std::f64::consts::PI.powi(2), 2.0)),
            EigenLaw::Power { scale, exponent } => Some((*scale, *exponent)),
            EigenLaw::Explicit(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnostic {
    /// `Σ_{n ≤ d} λ_n^{-(1-ε)}`.
    pub partial_sum: f64,
    /// Integral-test bound on the omitted tail; `None` for explicit spectra.
    pub tail_estimate: Option<f64>,
    pub convergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralOperator {
    law: EigenLaw,
    eigenvalues: Vec<f64>,
    trace_exponent: f64,
}

impl SpectralOperator {
    pub fn new(law: EigenLaw, dim: usize, trace_exponent: f64) -> Result<Self> {
        let eigenvalues: Vec<f64> = match &law {
            EigenLaw::Explicit(v) => v.clone(),
            other => {
                let (c, p) = other.growth().expect("growth law");
                (1..=dim).map(|n| c * (n as f64).powf(p)).collect()
            }
        };
        if eigenvalues.is_empty() {
            return Err(LabError::Config("operator dimension must be at least 1".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(LabError::Config(format!("eigenvalues must be positive, found {bad}")));
        }
        if !(trace_exponent > 0.0 && trace_exponent < 1.0) {
            return Err(LabError::Config(format!("trace exponent must lie in (0,1), got {trace_exponent}")));
        }
        Ok(Self { law, eigenvalues, trace_exponent })
    }

    /// Dirichlet Laplacian with the default trace exponent 0.4.
    pub fn dirichlet(dim: usize) -> Result<Self> {
        Self::new(EigenLaw::DirichletLaplacian, dim, 0.4)
    }

    pub fn law(&self) -> &EigenLaw {
        &self.law
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvalue(&self, mode: usize) -> f64 {
        self.eigenvalues[mode]
    }

    pub fn trace_exponent(&self) -> f64 {
        self.trace_exponent
    }

    /// Same law restricted to the first `n` modes.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let law = match &self.law {
            EigenLaw::Explicit(v) => EigenLaw::Explicit(v[..n.min(v.len())].to_vec()),
            other => other.clone(),
        };
        Self::new(law, n, self.trace_exponent)
    }

    /// `e^{-λ_n t}` for every mode.
    pub fn decay_factors(&self, t: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (-l * t).exp()).collect()
    }

    /// `(1 - e^{-λ_n t}) / λ_n` for every mode, the exact integral of the semigroup over `[0, t]`.
    pub fn integrated_factors(&self, t: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| -(-l * t).exp_m1() / l).collect()
    }

    pub fn semigroup_apply(&self, t: f64, x: &[f64]) -> Result<ModeVector> {
        if !(t >= 0.0) {
            return Err(LabError::Domain(format!("semigroup time must be nonnegative, got {t}")));
        }
        ensure_dim(self.dim(), x.len())?;
        Ok(x.iter().zip(&self.eigenvalues).map(|(v, l)| v * (-l * t).exp()).collect::<Vec<_>>().into())
    }

    /// Orthogonal projection onto the first `n` modes, still expressed in `d` coordinates.
    pub fn project(&self, x: &[f64], n: usize) -> ModeVector {
        x.iter().enumerate().map(|(i, v)| if i < n { *v } else { 0.0 }).collect::<Vec<_>>().into()
    }

    pub fn trace_diagnostic(&self) -> TraceDiagnostic {
        let e = 1.0 - self.trace_exponent;
        let partial_sum = self.eigenvalues.iter().map(|l| l.powf(-e)).sum();
        match self.law.growth() {
            Some((c, p)) => {
                let convergent = p * e > 1.0;
                let tail = if convergent {
                    c.powf(-e) * (self.dim() as f64).powf(1.0 - p * e) / (p * e - 1.0)
                } else {
                    f64::INFINITY
                };
                TraceDiagnostic { partial_sum, tail_estimate: Some(tail), convergent }
            }
            None => TraceDiagnostic { partial_sum, tail_estimate: None, convergent: true },
        }
    }

    /// `∫_0^t ‖e^{sA}‖_HS^2 ds = Σ_n (1 - e^{-2λ_n t}) / (2λ_n)`.
    pub fn semigroup_hs_integral(&self, t: f64) -> f64 {
        self.eigenvalues.iter().map(|l| -(-2.0 * l * t).exp_m1() / (2.0 * l)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn dirichlet_eigenvalues() {
        let op = SpectralOperator::dirichlet(16).unwrap();
        assert_eq!(op.dim(), 16);
        assert!((op.eigenvalue(0) - PI * PI).abs() < 1e-12);
        assert!((op.eigenvalue(15) - 256.0 * PI * PI).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SpectralOperator::new(EigenLaw::Explicit(vec![1.0, -2.0]), 2, 0.4).is_err());
        assert!(SpectralOperator::dirichlet(0).is_err());
        let op = SpectralOperator::dirichlet(2).unwrap();
        assert!(matches!(op.semigroup_apply(-1.0, &[1.0, 1.0]), Err(LabError::Domain(_))));
    }

    #[test]
    fn first_mode_decay() {
        let op = SpectralOperator::dirichlet(16).unwrap();
        let y = op.semigroup_apply(0.1, &ModeVector::unit(16, 0)).unwrap();
        assert!((y[0] - (-PI * PI * 0.1).exp()).abs() < 1e-15);
        assert!(y[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hs_integral_small_time() {
        let op = SpectralOperator::dirichlet(16).unwrap();
        let t = 1e-12;
        assert!((op.semigroup_hs_integral(t) / (16.0 * t) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trace_tail_brackets_true_tail() {
        let op = SpectralOperator::dirichlet(64).unwrap();
        let d = op.trace_diagnostic();
        assert!(d.convergent);
        let e = 0.6;
        let term = |n: f64| (PI * PI * n * n).powf(-e);
        let far: f64 = (65..2_000_000).map(|n| term(n as f64)).sum();
        let far_tail = crate::quadrature::integrate(|x| term(1.0 / x) / (x * x), 0.0, 1.0 / 2_000_000.0, 1e-12);
        let true_tail = far + far_tail;
        let lower = crate::quadrature::integrate(|x| term(1.0 / x) / (x * x), 0.0, 1.0 / 65.0, 1e-12);
        let upper = d.tail_estimate.unwrap();
        assert!(lower <= true_tail && true_tail <= upper, "{lower} {true_tail} {upper}");
    }

    #[test]
    fn divergent_trace_flagged() {
        let op = SpectralOperator::new(EigenLaw::Power { scale: 1.0, exponent: 1.0 }, 8, 0.4).unwrap();
        assert!(!op.trace_diagnostic().convergent);
    }

    proptest! {
        #[test]
        fn semigroup_property(t in 0.0f64..0.3, s in 0.0f64..0.3, x in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let op = SpectralOperator::dirichlet(8).unwrap();
            let a = op.semigroup_apply(t + s, &x).unwrap();
            let b = op.semigroup_apply(t, &op.semigroup_apply(s, &x).unwrap()).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
            prop_assert!(a.norm() <= norm(&x) + 1e-12);
        }

        #[test]
        fn projection_is_idempotent(n in 0usize..9, x in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let op = SpectralOperator::dirichlet(8).unwrap();
            let p = op.project(&x, n);
            prop_assert_eq!(op.project(&p, n), p);
        }
    }
}
