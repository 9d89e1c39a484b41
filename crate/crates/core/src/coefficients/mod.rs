//! Drift pair, noise operator and their sampled certificates.

mod drift;
mod growth;
mod modulus;
mod noise;

pub use drift::{RegularDrift, SingularDrift};
pub use growth::{GrowthCondition, Polynomial};
pub use modulus::{validate_modulus, DiniModulus, ModulusReport, DINI_LEVELS};
pub use noise::DiagonalNoise;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, LabError, Result};
use crate::rng::{Module, StreamKey};
use crate::spectral::{distance, norm};

/// Smooth cutoff: 1 on `[0, 1]`, 0 on `[2, ∞)`, quintic smoothstep in between.
pub fn cutoff_profile(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let u = r - 1.0;
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Lipschitz constant of [`cutoff_profile`].
pub const CUTOFF_LIPSCHITZ: f64 = 15.0 / 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub name: String,
    pub regular: RegularDrift,
    pub singular: SingularDrift,
    /// Declared modulus of continuity of the singular drift.
    #[serde(default)]
    pub envelope: Option<DiniModulus>,
    pub noise: DiagonalNoise,
    #[serde(default)]
    pub growth: Option<GrowthCondition>,
    /// Radius `m` of the cutoff truncation, if applied.
    #[serde(default)]
    pub cutoff: Option<f64>,
    /// Level `n` when `b` and `Q` are evaluated at `π_n x`.
    #[serde(default)]
    pub projection: Option<usize>,
}

/// Built-in coefficient families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `B = b = 0`, `Q = I`.
    Baseline,
    /// `B = b = 0`, `Q = I + 0.25·diag(tanh)` on two modes.
    Multiplicative,
    /// Log-power Dini drift on the first mode, `Q = I`.
    Dini,
    /// Square-root Hölder drift on the first mode, `Q = I`.
    Holder,
    /// Dissipative `B`, Dini `b`, multiplicative `Q`, with declared growth data.
    Dissipative,
    /// Cubic `B` without dissipation; explodes in finite time.
    Explosive,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Self::Baseline, Self::Multiplicative, Self::Dini, Self::Holder, Self::Dissipative, Self::Explosive];

    /// Presets with bounded drift, used by the consistency checks.
    pub const REGULAR: [Preset; 5] = [Self::Baseline, Self::Multiplicative, Self::Dini, Self::Holder, Self::Dissipative];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Multiplicative => "multiplicative",
            Self::Dini => "dini",
            Self::Holder => "holder",
            Self::Dissipative => "dissipative",
            Self::Explosive => "explosive",
        }
    }

    pub fn build(&self, dim: usize) -> Result<CoefficientSet> {
        if dim == 0 {
            return Err(LabError::Config("built-in sets need at least one mode".into()));
        }
        let k = dim.min(2);
        let dini_shape = DiniModulus::log_power_concave(1.0, 0.5)?;
        let dini = SingularDrift::Modulated {
            shape: dini_shape.clone(),
            direction: vec![1.0],
            center: vec![0.0; k],
            cap: 1.0,
        };
        let set = |singular, envelope, regular, noise| CoefficientSet {
            name: self.name().into(),
            regular,
            singular,
            envelope,
            noise,
            growth: None,
            cutoff: None,
            projection: None,
        };
        let mut out = match self {
            Self::Baseline => set(SingularDrift::Zero, None, RegularDrift::Zero, DiagonalNoise::identity(dim)),
            Self::Multiplicative => set(
                SingularDrift::Zero,
                None,
                RegularDrift::Zero,
                DiagonalNoise::tanh(vec![1.0; dim], 0.25, k),
            ),
            Self::Dini => set(dini, Some(dini_shape), RegularDrift::Zero, DiagonalNoise::identity(dim)),
            Self::Holder => {
                let shape = DiniModulus::holder(0.6, 0.5)?;
                set(
                    SingularDrift::Modulated {
                        shape: shape.clone(),
                        direction: vec![1.0],
                        center: vec![0.0; k],
                        cap: 1.0,
                    },
                    Some(shape),
                    RegularDrift::Zero,
                    DiagonalNoise::identity(dim),
                )
            }
            Self::Dissipative => set(
                dini,
                Some(dini_shape),
                RegularDrift::Dissipative { rate: 1.0 },
                DiagonalNoise::tanh(vec![1.0; dim], 0.2, k),
            ),
            Self::Explosive => set(
                SingularDrift::Zero,
                None,
                RegularDrift::Power { coef: 1.0, power: 3.0 },
                DiagonalNoise::identity(dim),
            ),
        };
        if let RegularDrift::Dissipative { rate } = out.regular {
            let beta = out.singular.sup_bound();
            out.growth = Some(GrowthCondition {
                phi: Polynomial(vec![1.0, 1.0]),
                h: Polynomial(vec![beta * beta / (2.0 * rate), 0.0, 0.5 * rate]),
            });
        }
        out.validate(dim)?;
        Ok(out)
    }
}

impl std::str::FromStr for Preset {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown coefficient preset '{s}'")))
    }
}

impl CoefficientSet {
    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        ensure_dim(dim, self.dim())?;
        self.noise.validate()?;
        match &self.singular {
            SingularDrift::Constant { value } if value.len() > dim => {
                return Err(LabError::Dimension { expected: dim, got: value.len() })
            }
            SingularDrift::Modulated { direction, center, cap, .. } => {
                if direction.len() > dim || center.len() > dim {
                    return Err(LabError::Config("singular drift support exceeds dimension".into()));
                }
                if !(*cap > 0.0) {
                    return Err(LabError::Config("singular drift cap must be positive".into()));
                }
            }
            _ => {}
        }
        if let Some(m) = self.cutoff {
            if !(m > 0.0) {
                return Err(LabError::Config("cutoff radius must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn has_singular_drift(&self) -> bool {
        !self.singular.is_zero()
    }

    fn cutoff_factor(&self, x: &[f64]) -> f64 {
        self.cutoff.map_or(1.0, |m| cutoff_profile(norm(x) / m))
    }

    /// Adds `scale·B_t(x)` to `out`.
    pub fn add_regular(&self, _t: f64, x: &[f64], scale: f64, out: &mut [f64]) {
        if !self.regular.is_zero() {
            self.regular.add_into(x, scale * self.cutoff_factor(x), out);
        }
    }

    /// Adds `scale·b_t(x)` to `out`.
    pub fn add_singular(&self, _t: f64, x: &[f64], scale: f64, out: &mut [f64]) {
        if self.singular.is_zero() {
            return;
        }
        match self.projection {
            Some(n) if n < x.len() => {
                let p: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i < n { *v } else { 0.0 }).collect();
                self.singular.add_into(&p, scale * self.cutoff_factor(&p), out);
            }
            _ => self.singular.add_into(x, scale * self.cutoff_factor(x), out),
        }
    }

    /// Coefficients evaluated at `π_n x`.
    pub fn projected(&self, n: usize) -> CoefficientSet {
        let mut out = self.clone();
        out.projection = Some(n);
        out.name = format!("{}[pi_{n}]", self.name);
        out
    }

    /// Leading modes read by `b` and `Q`; later modes of the reference process never feed back.
    pub fn coupled_modes(&self) -> usize {
        if self.cutoff.is_some() {
            return self.dim();
        }
        let level = if self.noise.is_constant() { 0 } else { self.noise.level };
        let m = self.singular.input_support().max(level);
        self.projection.map_or(m, |n| m.min(n))
    }

    pub fn singular_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.add_singular(t, x, 1.0, &mut out);
        out
    }

    pub fn regular_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.add_regular(t, x, 1.0, &mut out);
        out
    }

    /// Diagonal entries of `Q_t(x)`, including the cutoff.
    pub fn noise_diag(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        if self.noise.is_constant() {
            out.copy_from_slice(&self.noise.base);
            return;
        }
        let level = self.projection.map_or(self.noise.level, |n| n.min(self.noise.level));
        match self.cutoff {
            None if level == self.noise.level => self.noise.diag_into(x, out),
            None => {
                let p: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i < level { *v } else { 0.0 }).collect();
                self.noise.diag_into(&p, out)
            }
            Some(m) => {
                let r = norm(&x[..level]);
                let f = cutoff_profile(r / m);
                let scaled: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i < level { f * v } else { 0.0 }).collect();
                self.noise.diag_into(&scaled, out);
            }
        }
    }

    /// Whether derivative flows of the noise are available.
    pub fn noise_differentiable(&self) -> bool {
        self.noise.is_constant() || (self.cutoff.is_none() && self.projection.is_none())
    }

    /// `‖Q_s(x) − Q_s(π_n x)‖_HS`.
    pub fn cylindrical_defect(&self, s: f64, x: &[f64], n: usize) -> f64 {
        let d = self.dim();
        let projected: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i < n { *v } else { 0.0 }).collect();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        self.noise_diag(s, x, &mut a);
        self.noise_diag(s, &projected, &mut b);
        distance(&a, &b)
    }

    /// Cutoff truncation at radius `m`.
    pub fn truncate(&self, m: f64) -> Result<CoefficientSet> {
        if !(m > 0.0) {
            return Err(LabError::Domain(format!("truncation level must be positive, got {m}")));
        }
        let mut out = self.clone();
        out.cutoff = Some(m);
        out.name = format!("{}[m={m}]", self.name);
        Ok(out)
    }

    /// Random state pairs `(x, y)` at mixed scales for the sampled certificates.
    fn sample_pairs(&self, samples: usize, seed: u64, tag: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let key = StreamKey::new(seed, Module::Coefficients, tag);
        (0..samples as u64)
            .map(|i| {
                let mut s = key.path(i);
                let mut x = vec![0.0; d];
                let mut dir = vec![0.0; d];
                s.normals(0, &mut x);
                s.normals(1, &mut dir);
                let xs = [0.05, 0.3, 1.0, 3.0][(s.uniform(2) * 4.0) as usize % 4];
                let gap = 10f64.powf(-4.0 * s.uniform(3)) * 2.0;
                let dn = norm(&dir).max(1e-300);
                x.iter_mut().for_each(|v| *v *= xs);
                let y = x.iter().zip(&dir).map(|(a, b)| a + gap * b / dn).collect();
                (x, y)
            })
            .collect()
    }

    /// Max over sampled pairs of `|b(x) − b(y)| − φ(|x − y|)`; nonpositive when the declared
    /// envelope holds.
    pub fn modulus_envelope_check(&self, _horizon: f64, samples: usize, seed: u64) -> Result<f64> {
        let env = self
            .envelope
            .as_ref()
            .ok_or_else(|| LabError::Unsupported("no modulus declared for the singular drift".into()))?;
        Ok(self.envelope_excess(env, 0.0, samples, seed))
    }

    /// Max over sampled pairs of `|b(x) − b(y)| − φ(|x − y|) − lip·|x − y|`.
    pub fn envelope_excess(&self, env: &DiniModulus, lip: f64, samples: usize, seed: u64) -> f64 {
        let mut pairs = self.sample_pairs(samples, seed, 1);
        if let SingularDrift::Modulated { center, cap, .. } = &self.singular {
            // Pairs straddling the kink of the profile.
            let k = center.len();
            for (i, r) in [0.0, 1e-6, 0.5, *cap].iter().enumerate() {
                let mut x = vec![0.0; self.dim()];
                x[..k].copy_from_slice(center);
                x[0] += r;
                let mut y = x.clone();
                y[0] += 10f64.powi(-(i as i32) - 1);
                pairs.push((x, y));
            }
        }
        pairs
            .iter()
            .map(|(x, y)| {
                let gap = distance(&self.singular_at(0.0, x), &self.singular_at(0.0, y));
                let r = distance(x, y);
                gap - env.eval(r) - lip * r
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Max over samples of `⟨(B + b)(x + y), x⟩ − Φ(|x|^2) − h(|y|)`.
    pub fn one_sided_growth_check(&self, _horizon: f64, samples: usize, seed: u64) -> Result<f64> {
        let g = self
            .growth
            .as_ref()
            .ok_or_else(|| LabError::Unsupported("growth data (Φ, h) not declared".into()))?;
        let pairs = self.sample_pairs(samples, seed, 2);
        Ok(pairs
            .iter()
            .map(|(x, z)| {
                let y: Vec<f64> = z.iter().zip(x).map(|(a, b)| (a - b) * 1e3).collect();
                let y: Vec<f64> = y.iter().map(|v| v * norm(x).max(0.1) / norm(&y).max(1e-300)).collect();
                let s: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
                let mut drift = vec![0.0; s.len()];
                self.add_regular(0.0, &s, 1.0, &mut drift);
                self.add_singular(0.0, &s, 1.0, &mut drift);
                let lhs: f64 = drift.iter().zip(x).map(|(a, b)| a * b).sum();
                lhs - g.phi.eval(norm(x).powi(2)) - g.h.eval(norm(&y))
            })
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Smallest sampled eigenvalue of `Q Q*`.
    pub fn smallest_noise_eigenvalue(&self, samples: usize, seed: u64) -> f64 {
        self.sample_pairs(samples, seed, 3)
            .iter()
            .map(|(x, _)| {
                let q = self.noise.matrix(x);
                let qq = &q * q.transpose();
                SymmetricEigen::new(qq).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// The state-dependent part is admissible when the sampled floor of `QQ*` stays at least
    /// half that of the constant part.
    pub fn noise_admissible(&self, samples: usize, seed: u64) -> bool {
        let base_floor = self.noise.base.iter().map(|q| q * q).fold(f64::INFINITY, f64::min);
        self.smallest_noise_eigenvalue(samples, seed) >= 0.5 * base_floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_build_and_validate() {
        for p in Preset::ALL {
            let set = p.build(8).unwrap();
            assert_eq!(set.dim(), 8);
            assert!(set.noise_admissible(200, 1), "{}", p.name());
            if let Some(env) = &set.envelope {
                assert!(validate_modulus(env).unwrap().accepted());
                assert!(set.modulus_envelope_check(1.0, 2000, 3).unwrap() <= 0.0, "{}", p.name());
            }
        }
    }

    #[test]
    fn constant_drift_has_negative_violation() {
        let mut set = Preset::Baseline.build(4).unwrap();
        set.singular = SingularDrift::Constant { value: vec![0.5, 0.0] };
        set.envelope = Some(DiniModulus::holder(1.0, 0.5).unwrap());
        assert!(set.modulus_envelope_check(1.0, 500, 1).unwrap() < 0.0);
    }

    #[test]
    fn undersized_envelope_detected() {
        let mut set = Preset::Baseline.build(2).unwrap();
        set.singular = SingularDrift::Modulated {
            shape: DiniModulus::holder(1.0, 0.5).unwrap(),
            direction: vec![1.0],
            center: vec![0.0],
            cap: f64::INFINITY,
        };
        set.envelope = Some(DiniModulus::holder(0.5, 0.5).unwrap());
        assert!(set.modulus_envelope_check(1.0, 200, 1).unwrap() > 0.0);
    }

    #[test]
    fn cylindrical_defect_cases() {
        let set = Preset::Multiplicative.build(6).unwrap();
        let x = [0.3, -0.7, 1.1, 0.2, 0.0, 2.0];
        for n in 2..=6 {
            assert_eq!(set.cylindrical_defect(0.0, &x, n), 0.0);
        }
        let direct = 0.25 * (-0.7f64).tanh().abs();
        assert!((set.cylindrical_defect(0.0, &x, 1) - direct).abs() < 1e-15);
        let base = Preset::Baseline.build(6).unwrap();
        assert_eq!(base.cylindrical_defect(0.0, &x, 0), 0.0);
    }

    #[test]
    fn truncation_regions() {
        let set = Preset::Dini.build(4).unwrap();
        let tr = set.truncate(2.0).unwrap();
        let inside = [0.5, 0.1, 0.0, 0.0];
        assert_eq!(tr.singular_at(0.0, &inside), set.singular_at(0.0, &inside));
        let outside = [4.0, 0.0, 0.0, 0.0];
        assert!(tr.singular_at(0.0, &outside).iter().all(|v| *v == 0.0));
        let mid = [3.0, 0.0, 0.0, 0.0];
        let want = set.singular_at(0.0, &mid)[0] * cutoff_profile(1.5);
        assert_eq!(tr.singular_at(0.0, &mid)[0], want);
        assert!(cutoff_profile(1.5) > 0.0 && cutoff_profile(1.5) < 1.0);
        assert!(set.truncate(0.0).is_err());
    }

    #[test]
    fn cutoff_lipschitz_constant() {
        let max_slope = (0..10_000)
            .map(|i| {
                let r = 1.0 + i as f64 / 10_000.0;
                (cutoff_profile(r) - cutoff_profile(r + 1e-4)) / 1e-4
            })
            .fold(0.0, f64::max);
        assert!(max_slope <= CUTOFF_LIPSCHITZ + 1e-6 && max_slope > CUTOFF_LIPSCHITZ - 1e-3);
    }

    #[test]
    fn growth_checks() {
        let mut zero = Preset::Baseline.build(3).unwrap();
        zero.growth = Some(GrowthCondition { phi: Polynomial(vec![1.0]), h: Polynomial(vec![1.0]) });
        assert!(zero.one_sided_growth_check(1.0, 500, 1).unwrap() <= -1.0);

        let mut diss = zero.clone();
        diss.regular = RegularDrift::Dissipative { rate: 1.0 };
        diss.growth = Some(GrowthCondition { phi: Polynomial(vec![1.0]), h: Polynomial(vec![1.0, 0.0, 0.25]) });
        assert!(diss.one_sided_growth_check(1.0, 2000, 1).unwrap() <= 0.0);

        let mut sq = zero.clone();
        sq.regular = RegularDrift::Power { coef: 1.0, power: 2.0 };
        assert!(sq.one_sided_growth_check(1.0, 2000, 1).unwrap() > 0.0);

        let preset = Preset::Dissipative.build(4).unwrap();
        assert!(preset.one_sided_growth_check(2.0, 5000, 7).unwrap() <= 0.0);
        assert!(matches!(Preset::Dini.build(4).unwrap().one_sided_growth_check(1.0, 10, 1), Err(LabError::Unsupported(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn truncation_keeps_envelope(m in 0.2f64..3.0, seed in 0u64..1000) {
            let set = Preset::Dini.build(4).unwrap();
            let env = set.envelope.clone().unwrap();
            let tr = set.truncate(m).unwrap();
            let lip = set.singular.sup_bound() * CUTOFF_LIPSCHITZ / m;
            prop_assert!(tr.envelope_excess(&env, lip, 200, seed) <= 1e-12);
        }

        #[test]
        fn noise_floor_holds(seed in 0u64..1000) {
            let set = Preset::Multiplicative.build(4).unwrap();
            let floor = set.noise.smallest_entry().powi(2);
            prop_assert!(set.smallest_noise_eigenvalue(50, seed) >= floor - 1e-12);
        }
    }
}
