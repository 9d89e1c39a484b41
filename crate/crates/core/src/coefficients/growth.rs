use serde::{Deserialize, Serialize};

/// Polynomial `Σ_k c_k r^k` with nonnegative coefficients; increasing on `[0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn eval(&self, r: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * r + c)
    }

    pub fn is_increasing(&self) -> bool {
        self.0.iter().all(|c| *c >= 0.0)
    }
}

/// Growth data `(Φ, h)` of the one-sided condition
/// `⟨(B + b)(x + y), x⟩ ≤ Φ(|x|^2) + h(|y|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCondition {
    pub phi: Polynomial,
    pub h: Polynomial,
}

impl GrowthCondition {
    /// Bihari integral `Ψ(s) = ∫_1^s dr / (2Φ(r))` for affine `Φ`.
    pub fn bihari(&self, s: f64) -> Option<f64> {
        let (a, c) = self.affine()?;
        Some(if c == 0.0 { (s - 1.0) / (2.0 * a) } else { ((a + c * s) / (a + c)).ln() / (2.0 * c) })
    }

    /// Inverse of [`Self::bihari`].
    pub fn bihari_inverse(&self, v: f64) -> Option<f64> {
        let (a, c) = self.affine()?;
        Some(if c == 0.0 { 1.0 + 2.0 * a * v } else { ((a + c) * (2.0 * c * v).exp() - a) / c })
    }

    fn affine(&self) -> Option<(f64, f64)> {
        let p = &self.phi.0;
        if p.len() > 2 || p.iter().skip(2).any(|c| *c != 0.0) || p.first().copied().unwrap_or(0.0) <= 0.0 {
            return None;
        }
        Some((p[0], p.get(1).copied().unwrap_or(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bihari_closed_form_and_inverse() {
        let g = GrowthCondition { phi: Polynomial(vec![1.0, 1.0]), h: Polynomial(vec![1.0]) };
        for s in [0.5, 1.0, 3.0, 40.0] {
            let want = 0.5 * ((1.0 + s) / 2.0f64).ln();
            let got = g.bihari(s).unwrap();
            assert!((got - want).abs() < 1e-14);
            assert!((g.bihari_inverse(got).unwrap() - s).abs() < 1e-10 * s);
        }
        let quad = crate::quadrature::integrate(|r| 0.5 / (1.0 + r), 1.0, 7.0, 1e-13);
        assert!((g.bihari(7.0).unwrap() - quad).abs() < 1e-12);
    }

    #[test]
    fn superlinear_phi_has_no_bihari_form() {
        let g = GrowthCondition { phi: Polynomial(vec![1.0, 0.0, 1.0]), h: Polynomial(vec![1.0]) };
        assert!(g.bihari(2.0).is_none());
    }
}
