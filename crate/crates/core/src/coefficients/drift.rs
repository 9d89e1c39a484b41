//! Regular (locally Lipschitz) and singular (Dini-continuous, bounded) drift families.

use serde::{Deserialize, Serialize};

use super::modulus::DiniModulus;
use crate::spectral::norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularDrift {
    Zero,
    /// `B(x) = -rate·x`.
    Dissipative { rate: f64 },
    /// `B(x) = coef·|x|^{power-1}·x`; superlinear growth for `power > 1`.
    Power { coef: f64, power: f64 },
}

impl RegularDrift {
    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    /// Adds `scale·B(x)` to `out`.
    pub fn add_into(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Self::Zero => {}
            Self::Dissipative { rate } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o -= scale * rate * v;
                }
            }
            Self::Power { coef, power } => {
                let r = norm(x);
                let f = if r > 0.0 { coef * r.powf(power - 1.0) } else { 0.0 };
                for (o, v) in out.iter_mut().zip(x) {
                    *o += scale * f * v;
                }
            }
        }
    }

    /// Lipschitz constant on the ball of radius `r`.
    pub fn lipschitz_bound(&self, r: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Dissipative { rate } => rate.abs(),
            Self::Power { coef, power } => coef.abs() * power.max(1.0) * r.powf(power - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SingularDrift {
    Zero,
    Constant { value: Vec<f64> },
    /// `b(x) = direction·shape(min(|π_k x - center|, cap))` with `k = center.len()`.
    Modulated { shape: DiniModulus, direction: Vec<f64>, center: Vec<f64>, cap: f64 },
}

impl SingularDrift {
    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => value.iter().all(|v| *v == 0.0),
            Self::Modulated { direction, .. } => direction.iter().all(|v| *v == 0.0),
        }
    }

    /// Number of leading modes in which `b` can be nonzero.
    pub fn value_support(&self) -> usize {
        let last_nonzero = |v: &[f64]| v.iter().rposition(|x| *x != 0.0).map_or(0, |i| i + 1);
        match self {
            Self::Zero => 0,
            Self::Constant { value } => last_nonzero(value),
            Self::Modulated { direction, .. } => last_nonzero(direction),
        }
    }

    /// Number of leading modes that `b` reads.
    pub fn input_support(&self) -> usize {
        match self {
            Self::Modulated { center, .. } => center.len(),
            _ => 0,
        }
    }

    /// Scalar profile multiplying the direction.
    fn profile(&self, x: &[f64]) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { .. } => 1.0,
            Self::Modulated { shape, center, cap, .. } => {
                let r = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum::<f64>().sqrt();
                shape.eval(r.min(*cap))
            }
        }
    }

    /// Adds `scale·b(x)` to `out`.
    pub fn add_into(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let v = match self {
            Self::Zero => return,
            Self::Constant { value } => value,
            Self::Modulated { direction, .. } => direction,
        };
        let p = scale * self.profile(x);
        for (o, d) in out.iter_mut().zip(v) {
            *o += p * d;
        }
    }

    /// `sup_x |b(x)|`.
    pub fn sup_bound(&self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { value } => norm(value),
            Self::Modulated { shape, direction, cap, .. } => {
                let s = if cap.is_finite() { shape.eval(*cap) } else { f64::INFINITY };
                norm(direction) * s
            }
        }
    }
}
