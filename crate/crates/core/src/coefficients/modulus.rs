//! Moduli of continuity in the Dini class: increasing, with concave square and finite
//! `∫_0^1 φ(s)/s ds`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::quadrature::{integrate_from_zero, DyadicIntegral};

/// Number of dyadic levels used for the Dini integral.
pub const DINI_LEVELS: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DiniModulus {
    /// `φ(s) = K / log^{1+δ}(c + 1/s)`.
    LogPower { k: f64, delta: f64, c: f64 },
    /// `φ(s) = K s^α`.
    Holder { k: f64, alpha: f64 },
    /// Tabulated values; `φ²` is interpolated linearly through `(0, 0)` and the listed points
    /// and held constant beyond the last.
    Table { s: Vec<f64>, phi: Vec<f64> },
}

impl DiniModulus {
    pub fn log_power(k: f64, delta: f64, c: f64) -> Result<Self> {
        if !(k > 0.0 && delta >= 0.0 && c >= std::f64::consts::E) {
            return Err(LabError::Config(format!(
                "log_power needs K>0, δ≥0, c≥e; got K={k}, δ={delta}, c={c}"
            )));
        }
        Ok(Self::LogPower { k, delta, c })
    }

    /// Log-power modulus with the smallest offset `c = e·2^{j/4}` (j ≥ 0) for which `φ²`
    /// passes the sampled concavity check.
    pub fn log_power_concave(k: f64, delta: f64) -> Result<Self> {
        let e = std::f64::consts::E;
        for j in 0..64 {
            let m = Self::log_power(k, delta, e * 2f64.powf(j as f64 / 4.0))?;
            if m.concavity_defect() <= 0.0 {
                return Ok(m);
            }
        }
        Err(LabError::Config(format!("no concave log_power offset found for δ={delta}")))
    }

    pub fn holder(k: f64, alpha: f64) -> Result<Self> {
        if !(k > 0.0 && alpha > 0.0 && alpha <= 1.0) {
            return Err(LabError::Config(format!("holder needs K>0, α∈(0,1]; got K={k}, α={alpha}")));
        }
        Ok(Self::Holder { k, alpha })
    }

    pub fn table(s: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if s.is_empty() || s.len() != phi.len() {
            return Err(LabError::Config("modulus table needs matching nonempty columns".into()));
        }
        if s[0] <= 0.0 || s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config("modulus table abscissae must be positive and increasing".into()));
        }
        if phi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(LabError::Config("modulus table values must be finite and nonnegative".into()));
        }
        Ok(Self::Table { s, phi })
    }

    /// Reads a CSV with header `s,phi`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let (mut s, mut phi) = (Vec::new(), Vec::new());
        for record in reader.deserialize() {
            let (a, b): (f64, f64) = record?;
            s.push(a);
            phi.push(b);
        }
        Self::table(s, phi)
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            Self::LogPower { k, delta, c } => k / (c + 1.0 / s).ln().powf(1.0 + delta),
            Self::Holder { k, alpha } => k * s.powf(*alpha),
            Self::Table { s: xs, phi } => {
                let i = xs.partition_point(|x| *x < s);
                if i == xs.len() {
                    phi[phi.len() - 1]
                } else if i == 0 {
                    (phi[0] * phi[0] * s / xs[0]).sqrt()
                } else {
                    let w = (s - xs[i - 1]) / (xs[i] - xs[i - 1]);
                    let (a, b) = (phi[i - 1] * phi[i - 1], phi[i] * phi[i]);
                    (a + w * (b - a)).sqrt()
                }
            }
        }
    }

    /// Sampling grid: `2^{-k}` for k = 0..40 merged with a uniform grid on [0, 1].
    pub fn sample_grid() -> Vec<f64> {
        let mut g: Vec<f64> = (0..=40).map(|k| 0.5f64.powi(k)).collect();
        g.extend((1..=1000).map(|i| i as f64 / 1000.0));
        g.sort_by(|a, b| a.total_cmp(b));
        g.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * b.abs());
        g
    }

    /// Largest increase of consecutive slopes of `φ²` on the sample grid, relative to the
    /// slope scale; positive values beyond 1e-9 mean concavity fails.
    pub fn concavity_defect(&self) -> f64 {
        let g = Self::sample_grid();
        let f: Vec<f64> = g.iter().map(|s| self.eval(*s).powi(2)).collect();
        let slopes: Vec<f64> = (1..g.len()).map(|i| (f[i] - f[i - 1]) / (g[i] - g[i - 1])).collect();
        slopes
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].abs().max(w[1].abs()).max(1.0) - 1e-9)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_increasing(&self) -> bool {
        let g = Self::sample_grid();
        let mut prev = self.eval(0.0);
        g.iter().all(|s| {
            let v = self.eval(*s);
            let ok = v >= prev && v >= 0.0;
            prev = v;
            ok
        })
    }

    pub fn dini_integral(&self) -> DyadicIntegral {
        integrate_from_zero(|s| self.eval(s) / s, 1.0, DINI_LEVELS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusReport {
    pub dini_integral: f64,
    pub concave: bool,
    pub increasing: bool,
    pub decay_exponent: f64,
}

impl ModulusReport {
    pub fn accepted(&self) -> bool {
        self.concave && self.increasing && self.dini_integral.is_finite()
    }
}

/// Checks the three defining properties; a divergent integral is an error carrying the
/// partial-sum trace.
pub fn validate_modulus(phi: &DiniModulus) -> Result<ModulusReport> {
    let integral = phi.dini_integral();
    if !integral.convergent || integral.partial_sums.iter().any(|s| *s > 1e6) {
        return Err(LabError::DivergentModulus { trace: integral.partial_sums });
    }
    Ok(ModulusReport {
        dini_integral: integral.value,
        concave: phi.concavity_defect() <= 0.0,
        increasing: phi.is_increasing(),
        decay_exponent: integral.decay_exponent,
    })
}
