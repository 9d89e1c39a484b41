//! Change of measure from the drift-free reference process to the full equation: path weights,
//! the weak representation of `P_T`, a strong Feller probe and the composed Harnack inequality.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, SingularDrift};
use crate::error::{ensure_dim, LabError, Result};
use crate::mild::{simulate_mild, simulate_mild_with, IncrementSource};
use crate::ou::{OuPath, CONDITION_LIMIT};
use crate::rng::StreamKey;
use crate::spectral::SpectralOperator;
use crate::stats::{batch_means, batch_se, column, median_of_means, sample_paths, Estimate};
use crate::testfn::ScalarField;

/// Seed groups of the median-of-means moment estimates.
pub const MOMENT_GROUPS: usize = 16;

/// Largest relative disagreement between half-sample moment estimates still reported as stable.
pub const MOMENT_STABILITY: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPath {
    pub path: OuPath,
    /// `log R_T`.
    pub log_weight: f64,
}

impl WeightedPath {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// The set with its singular drift removed; its solution is the reference process.
pub fn reference_set(set: &CoefficientSet) -> CoefficientSet {
    CoefficientSet { singular: SingularDrift::Zero, ..set.clone() }
}

/// `Σ⟨Q^{-1}b(Z_k), ΔW_k⟩ − ½Σ|Q^{-1}b(Z_k)|²Δ` from the stored states and increments.
pub fn recompute_log_weight(set: &CoefficientSet, path: &OuPath) -> Result<f64> {
    if !set.has_singular_drift() {
        return Ok(0.0);
    }
    let d = set.dim();
    let dt = path.times[1] - path.times[0];
    let mut b = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut log_r = 0.0;
    for (k, dw) in path.increments.iter().enumerate() {
        let (t, z) = (path.times[k], &path.states[k]);
        b.iter_mut().for_each(|v| *v = 0.0);
        set.add_singular(t, z, 1.0, &mut b);
        set.noise_diag(t, z, &mut q);
        let (lo, hi) = q.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v * v), hi.max(v * v)));
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
            return Err(LabError::NotInvertible(format!("cond(QQ*) = {} at t = {t}", hi / lo)));
        }
        for n in 0..d {
            let theta = b[n] / q[n];
            log_r += theta * dw[n] - 0.5 * theta * theta * dt;
        }
    }
    if !log_r.is_finite() {
        return Err(LabError::NonFinite("log-weight".into()));
    }
    Ok(log_r)
}

/// Reference path from `x` on `[0, T]` together with its Girsanov log-weight.
pub fn girsanov_weight(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x: &[f64],
    horizon: f64,
    dt: f64,
    key: &StreamKey,
    path: u64,
) -> Result<WeightedPath> {
    let reference = reference_set(set);
    let sol = simulate_mild_with(op, &reference, x, horizon, dt, &mut IncrementSource::new(key, path, dt, 0))?;
    if sol.exploded {
        return Err(LabError::NonFinite(format!("reference path exploded at t = {:?}", sol.exit_time)));
    }
    let path = OuPath {
        times: sol.times,
        states: sol.states,
        increments: sol.increments,
        first_flow: None,
        first_flow_prime: None,
        second_flow: None,
    };
    let log_weight = recompute_log_weight(set, &path)?;
    Ok(WeightedPath { path, log_weight })
}

/// Runs `g(Z_T, log R_T, row)` over `n` weighted paths.
#[allow(clippy::too_many_arguments)]
fn weighted_table<G>(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
    k: usize,
    g: G,
) -> Result<Vec<f64>>
where
    G: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    ensure_dim(op.dim(), x.len())?;
    let failure = Mutex::new(None);
    let table = sample_paths(n, k, |i, row| match girsanov_weight(op, set, x, horizon, dt, key, i) {
        Ok(w) => g(w.path.states.last().expect("non-empty path"), w.log_weight, row),
        Err(e) => {
            failure.lock().unwrap().get_or_insert(e);
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(table),
    }
}

/// `P_T f(x) = E[f(Z_T) R_T]`.
#[allow(clippy::too_many_arguments)]
pub fn weak_representation(
    op: &SpectralOperator,
    set: &CoefficientSet,
    f: &dyn ScalarField,
    x: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
) -> Result<Estimate> {
    let table = weighted_table(op, set, x, horizon, dt, n, key, 1, |z, lr, row| row[0] = f.eval(z) * lr.exp())?;
    Ok(Estimate::from_samples(&table, key.seed))
}

/// `E[f_j(Z_T) R_T]` for each `f_j`, followed by `E[R_T]`.
#[allow(clippy::too_many_arguments)]
pub fn weighted_estimates(
    op: &SpectralOperator,
    set: &CoefficientSet,
    fs: &[&dyn ScalarField],
    x: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
) -> Result<Vec<Estimate>> {
    let k = fs.len() + 1;
    let table = weighted_table(op, set, x, horizon, dt, n, key, k, |z, lr, row| {
        let r = lr.exp();
        for (slot, f) in row.iter_mut().zip(fs) {
            *slot = f.eval(z) * r;
        }
        row[k - 1] = r;
    })?;
    Ok(crate::stats::column_estimates(&table, k, key.seed))
}

/// `P_T f(x) = E f(X_T)` by direct simulation of the full equation.
#[allow(clippy::too_many_arguments)]
pub fn direct_estimate(
    op: &SpectralOperator,
    set: &CoefficientSet,
    f: &dyn ScalarField,
    x: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
) -> Result<Estimate> {
    ensure_dim(op.dim(), x.len())?;
    let failure = Mutex::new(None);
    let table = sample_paths(n, 1, |i, row| match simulate_mild(op, set, x, horizon, dt, key, i) {
        Ok(p) => row[0] = f.eval(p.states.last().expect("non-empty path")),
        Err(e) => {
            failure.lock().unwrap().get_or_insert(e);
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(Estimate::from_samples(&table, key.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FellerRow {
    pub radius: f64,
    /// `|P_T f(x + r e) − P_T f(x)|`.
    pub gap: f64,
    /// Standard error of the paired difference; the Monte Carlo noise floor of the row.
    pub noise_floor: f64,
    pub seed: u64,
}

/// Continuity table of `P_T f` at `x` along `direction`, with every radius driven by the same
/// increments.
#[allow(clippy::too_many_arguments)]
pub fn strong_feller_probe(
    op: &SpectralOperator,
    set: &CoefficientSet,
    f: &dyn ScalarField,
    x: &[f64],
    direction: &[f64],
    radii: &[f64],
    horizon: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
) -> Result<Vec<FellerRow>> {
    let d = op.dim();
    ensure_dim(d, x.len())?;
    ensure_dim(d, direction.len())?;
    let k = radii.len() + 1;
    let failure = Mutex::new(None);
    let table = sample_paths(n, k, |i, row| {
        let mut run = |start: &[f64], j: usize| match simulate_mild(op, set, start, horizon, dt, key, i) {
            Ok(p) => row[j] = f.eval(p.states.last().expect("non-empty path")),
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
            }
        };
        run(x, 0);
        for (j, r) in radii.iter().enumerate() {
            let shifted: Vec<f64> = x.iter().zip(direction).map(|(a, e)| a + r * e).collect();
            run(&shifted, j + 1);
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let base = column(&table, k, 0);
    Ok(radii
        .iter()
        .enumerate()
        .map(|(j, &radius)| {
            let diff: Vec<f64> = column(&table, k, j + 1).iter().zip(&base).map(|(a, b)| a - b).collect();
            let est = Estimate::from_samples(&diff, key.seed);
            FellerRow { radius, gap: est.estimate.abs(), noise_floor: est.std_error, seed: key.seed }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    /// `(P_T f(x))^{p³}`.
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub margin: f64,
    pub margin_se: f64,
    /// `sup_t ‖Q*(QQ*)^{-1}‖²`.
    pub noise_constant: f64,
    /// `E (R^y)^{1/(1−p)}`.
    pub moment_y: f64,
    /// `E (R^x)^{p/(1−p)}`.
    pub moment_x: f64,
    /// Half-sample moment estimates agree within [`MOMENT_STABILITY`].
    pub moments_stable: bool,
    pub seed: u64,
}

impl HarnackReport {
    pub fn holds(&self, sigmas: f64) -> bool {
        self.margin >= -sigmas * self.margin_se
    }
}

/// Median-of-means moment, its batch standard error and a half-sample stability flag.
fn robust_moment(samples: &[f64]) -> (f64, f64, bool) {
    let m = median_of_means(samples, MOMENT_GROUPS);
    let se = batch_se(&batch_means(samples, MOMENT_GROUPS));
    let half = samples.len() / 2;
    let a = median_of_means(&samples[..half], MOMENT_GROUPS / 2);
    let b = median_of_means(&samples[half..], MOMENT_GROUPS / 2);
    let stable = m.is_finite() && (a - b).abs() <= MOMENT_STABILITY * a.abs().max(b.abs());
    (m, se, stable)
}

/// Both sides of the Harnack inequality for `P_T` composed from the reference inequality and
/// Hölder bounds on the weight moments. Constant noise only.
#[allow(clippy::too_many_arguments)]
pub fn harnack_compose(
    op: &SpectralOperator,
    set: &CoefficientSet,
    f: &dyn ScalarField,
    x: &[f64],
    y: &[f64],
    horizon: f64,
    p: f64,
    dt: f64,
    n: usize,
    key: &StreamKey,
) -> Result<HarnackReport> {
    if !set.noise.is_constant() {
        return Err(LabError::Unsupported("composed Harnack inequality needs constant noise".into()));
    }
    if !(p > 1.0) {
        return Err(LabError::Domain(format!("Harnack exponent must exceed 1, got {p}")));
    }
    if n < 2 * MOMENT_GROUPS {
        return Err(LabError::Domain(format!("need at least {} paths", 2 * MOMENT_GROUPS)));
    }
    let d = op.dim();
    ensure_dim(d, y.len())?;
    let p3 = p.powi(3);
    let noise_constant = set.noise.base.iter().map(|q| 1.0 / (q * q)).fold(0.0, f64::max);

    let tx = weighted_table(op, set, x, horizon, dt, n, &key.child(0), 2, |z, lr, row| {
        row[0] = f.eval(z) * lr.exp();
        row[1] = (p / (1.0 - p) * lr).exp();
    })?;
    let ty = weighted_table(op, set, y, horizon, dt, n, &key.child(1), 2, |z, lr, row| {
        row[0] = f.eval(z).powf(p3) * lr.exp();
        row[1] = (lr / (1.0 - p)).exp();
    })?;
    let pfx = Estimate::from_samples(&column(&tx, 2, 0), key.seed);
    let pfy = Estimate::from_samples(&column(&ty, 2, 0), key.seed);
    let (mx, mx_se, sx) = robust_moment(&column(&tx, 2, 1));
    let (my, my_se, sy) = robust_moment(&column(&ty, 2, 1));
    if !(pfx.estimate > 0.0) || !(pfy.estimate > 0.0) {
        return Err(LabError::Domain("test function must be positive".into()));
    }

    let lhs = pfx.estimate.powf(p3);
    let lhs_se = p3 * lhs * pfx.std_error / pfx.estimate;
    let dist_sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    let shift = (p * p * dist_sq / (2.0 * noise_constant * (p - 1.0))).exp();
    let rhs = pfy.estimate * my.powf(p - 1.0) * mx.powf(p * p * (p - 1.0)) * shift;
    let rel = ((pfy.std_error / pfy.estimate).powi(2)
        + ((p - 1.0) * my_se / my).powi(2)
        + (p * p * (p - 1.0) * mx_se / mx).powi(2))
    .sqrt();
    let rhs_se = rhs * rel;
    Ok(HarnackReport {
        lhs,
        lhs_se,
        rhs,
        rhs_se,
        margin: rhs - lhs,
        margin_se: lhs_se.hypot(rhs_se),
        noise_constant,
        moment_y: my,
        moment_x: mx,
        moments_stable: sx && sy,
        seed: key.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Preset;
    use crate::rng::Module;
    use crate::testfn::TestFunction;

    fn key(e: u64) -> StreamKey {
        StreamKey::new(23, Module::Girsanov, e)
    }

    #[test]
    fn no_singular_drift_gives_unit_weight() {
        let op = SpectralOperator::dirichlet(3).unwrap();
        let set = Preset::Multiplicative.build(3).unwrap();
        let w = girsanov_weight(&op, &set, &[0.2, 0.1, 0.0], 0.5, 1.0 / 64.0, &key(0), 4).unwrap();
        assert_eq!(w.log_weight, 0.0);
        assert_eq!(w.weight(), 1.0);
    }

    #[test]
    fn constant_drift_closed_form() {
        let op = SpectralOperator::dirichlet(1).unwrap();
        let mut set = Preset::Baseline.build(1).unwrap();
        let beta = 0.7;
        set.singular = SingularDrift::Constant { value: vec![beta] };
        let (t, dt) = (0.5, 1.0 / 128.0);
        for i in 0..5 {
            let w = girsanov_weight(&op, &set, &[0.3], t, dt, &key(1), i).unwrap();
            let wt: f64 = w.path.increments.iter().map(|v| v[0]).sum();
            let want = beta * wt - 0.5 * beta * beta * t;
            assert!((w.log_weight - want).abs() < 1e-12, "{} vs {want}", w.log_weight);
            assert_eq!(recompute_log_weight(&set, &w.path).unwrap(), w.log_weight);
        }
    }

    #[test]
    fn weight_has_unit_mean() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        for preset in [Preset::Dini, Preset::Holder, Preset::Dissipative] {
            let set = preset.build(4).unwrap();
            let one = |_: &[f64]| 1.0;
            let e = weak_representation(&op, &set, &one, &[0.1, 0.0, 0.0, 0.0], 0.5, 1.0 / 32.0, 4000, &key(2)).unwrap();
            assert!(e.within(1.0, 4.0), "{}: {e:?}", preset.name());
        }
    }

    #[test]
    fn weak_and_direct_estimates_agree() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Dini.build(4).unwrap();
        let f = TestFunction::Tanh { weights: vec![1.0, 0.5, 0.0, 0.0], scale: 4.0 };
        let x = [0.05, 0.0, 0.0, 0.0];
        let (t, dt) = (0.25, 1.0 / 256.0);
        let w = weak_representation(&op, &set, &f, &x, t, dt, 4000, &key(3)).unwrap();
        let d = direct_estimate(&op, &set, &f, &x, t, dt, 4000, &key(4)).unwrap();
        assert!((w.estimate - d.estimate).abs() <= 3.0 * w.combined_se(&d), "{w:?} vs {d:?}");
        let plain = weak_representation(&op, &reference_set(&set), &f, &x, t, dt, 4000, &key(4)).unwrap();
        let direct_plain = direct_estimate(&op, &reference_set(&set), &f, &x, t, dt, 4000, &key(4)).unwrap();
        assert_eq!(plain.estimate, direct_plain.estimate);
    }

    #[test]
    fn feller_probe_shrinks_with_radius() {
        let op = SpectralOperator::dirichlet(2).unwrap();
        let set = Preset::Dini.build(2).unwrap();
        let x = [0.05, 0.0];
        let f = TestFunction::HalfSpace { weights: vec![1.0, 0.0], level: 0.05 };
        let radii = [0.5, 0.25, 0.125, 0.0625];
        let rows = strong_feller_probe(&op, &set, &f, &x, &[1.0, 0.0], &radii, 0.5, 1.0 / 64.0, 2000, &key(5)).unwrap();
        assert!(rows.windows(2).all(|w| w[1].gap <= w[0].gap + 2.0 * w[0].noise_floor), "{rows:?}");
        let short = strong_feller_probe(&op, &set, &f, &x, &[1.0, 0.0], &[0.5], 1.0 / 256.0, 1.0 / 1024.0, 2000, &key(5))
            .unwrap();
        assert!(short[0].gap > 0.3, "{short:?}");
    }

    #[test]
    fn harnack_gaussian_oracle() {
        let op = SpectralOperator::dirichlet(1).unwrap();
        let set = Preset::Baseline.build(1).unwrap();
        let (t, p, w) = (0.5, 2.0, 0.8);
        let f = TestFunction::Exponential { weights: vec![w] };
        let (x, y) = ([0.5], [0.0]);
        let r = harnack_compose(&op, &set, &f, &x, &y, t, p, 1.0 / 256.0, 4096, &key(6)).unwrap();
        assert_eq!((r.moment_x, r.moment_y), (1.0, 1.0));
        let lam = op.eigenvalue(0);
        let decay = (-lam * t).exp();
        let var = -(-2.0 * lam * t).exp_m1() / (2.0 * lam);
        let p3: f64 = p * p * p;
        let lhs = (p3 * w * decay * x[0] + 0.5 * p3 * w * w * var).exp();
        let rhs = (p3 * w * decay * y[0] + 0.5 * p3 * p3 * w * w * var + p * p * 0.25 / (2.0 * (p - 1.0))).exp();
        assert!(rhs > lhs);
        assert!((r.lhs / lhs - 1.0).abs() < 4.0 * r.lhs_se / r.lhs + 0.02, "{} vs {lhs}", r.lhs);
        assert!((r.rhs / rhs - 1.0).abs() < 4.0 * r.rhs_se / r.rhs + 0.02, "{} vs {rhs}", r.rhs);
        assert!(r.holds(3.0));
    }

    #[test]
    fn harnack_with_dini_drift() {
        let op = SpectralOperator::dirichlet(2).unwrap();
        let set = Preset::Dini.build(2).unwrap();
        let f = TestFunction::Exponential { weights: vec![0.5, 0.0] };
        let same = harnack_compose(&op, &set, &f, &[0.1, 0.0], &[0.1, 0.0], 0.5, 2.0, 1.0 / 64.0, 2048, &key(7)).unwrap();
        assert!(same.holds(3.0) && same.moments_stable, "{same:?}");
        let far = harnack_compose(&op, &set, &f, &[0.5, 0.0], &[0.0, 0.0], 0.5, 2.0, 1.0 / 64.0, 2048, &key(8)).unwrap();
        assert!(far.holds(3.0), "{far:?}");
        let mult = Preset::Multiplicative.build(2).unwrap();
        assert!(harnack_compose(&op, &mult, &f, &[0.0; 2], &[0.0; 2], 0.5, 2.0, 0.1, 64, &key(9)).is_err());
    }
}
