//! Diagonal noise `Q(x) = diag(q_n) + ε·diag(tanh x_n, n < m)`, cylindrical at level `m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalNoise {
    pub base: Vec<f64>,
    #[serde(default)]
    pub amplitude: f64,
    /// Cylindrical level: the state dependence reads only the first `level` modes.
    #[serde(default)]
    pub level: usize,
}

impl DiagonalNoise {
    pub fn constant(base: Vec<f64>) -> Self {
        Self { base, amplitude: 0.0, level: 0 }
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(vec![1.0; dim])
    }

    pub fn tanh(base: Vec<f64>, amplitude: f64, level: usize) -> Self {
        Self { base, amplitude, level }
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn is_constant(&self) -> bool {
        self.amplitude == 0.0 || self.level == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.level > self.dim() {
            return Err(LabError::Config(format!("noise level {} exceeds dimension {}", self.level, self.dim())));
        }
        let floor = self.smallest_entry();
        if !(floor > 0.0) {
            return Err(LabError::NotInvertible(format!(
                "diagonal entries can reach {floor}; need |q_n| > ε on the state-dependent modes"
            )));
        }
        Ok(())
    }

    /// Worst-case `min_n |Q_nn(x)|` over all states.
    pub fn smallest_entry(&self) -> f64 {
        self.base
            .iter()
            .enumerate()
            .map(|(n, q)| if n < self.level { q.abs() - self.amplitude.abs() } else { q.abs() })
            .fold(f64::INFINITY, f64::min)
    }

    /// `sup_x ‖Q(x)^{-1}‖^2`.
    pub fn inverse_norm_sq_bound(&self) -> f64 {
        self.smallest_entry().powi(-2)
    }

    /// `sup_x ‖Q(x)‖_HS^2`.
    pub fn hs_norm_sq_bound(&self) -> f64 {
        self.base
            .iter()
            .enumerate()
            .map(|(n, q)| if n < self.level { (q.abs() + self.amplitude.abs()).powi(2) } else { q * q })
            .sum()
    }

    /// Diagonal entries at `x`.
    pub fn diag_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.base);
        if self.amplitude != 0.0 {
            for n in 0..self.level {
                out[n] += self.amplitude * x[n].tanh();
            }
        }
    }

    /// Diagonal of `(∇_v Q)(x)`.
    pub fn derivative_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for n in 0..self.level {
            let c = x[n].cosh();
            out[n] = self.amplitude * v[n] / (c * c);
        }
    }

    /// Diagonal of `(∇_w ∇_v Q)(x)`.
    pub fn second_derivative_into(&self, x: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for n in 0..self.level {
            let c = x[n].cosh();
            out[n] = -2.0 * self.amplitude * x[n].tanh() * v[n] * w[n] / (c * c);
        }
    }

    pub fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut d = vec![0.0; self.dim()];
        self.diag_into(x, &mut d);
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d))
    }
}
