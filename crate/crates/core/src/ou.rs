//! Reference O–U type equation `dZ = AZ dt + Q(Z) dW`, its derivative flows, and Monte Carlo
//! estimators of its semigroup, Bismut gradient, second derivative and resolvent.

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{ensure_dim, ensure_positive, LabError, Result};
use crate::rng::{PathStream, StreamKey};
use crate::spectral::{ModeVector, SpectralOperator};
use crate::stats::{column_estimates, sample_paths, Estimate};
use crate::testfn::ScalarField;

/// Largest accepted condition number of `QQ*`.
pub const CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flows {
    None,
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuPath {
    pub times: Vec<f64>,
    pub states: Vec<ModeVector>,
    /// Increments of step `k`, scaled by `√Δ`.
    pub increments: Vec<Vec<f64>>,
    /// `∇_η Z` per node.
    pub first_flow: Option<Vec<ModeVector>>,
    /// `∇_{η'} Z` per node, stored alongside the second flow.
    pub first_flow_prime: Option<Vec<ModeVector>>,
    /// `∇_{η'}∇_η Z` per node.
    pub second_flow: Option<Vec<ModeVector>>,
}

/// Number of uniform steps of size `dt` in `[s, t]`; `dt` must divide the interval.
pub fn step_count(s: f64, t: f64, dt: f64) -> Result<usize> {
    ensure_positive("time step", dt)?;
    if !(t >= s) {
        return Err(LabError::Domain(format!("interval [{s}, {t}] is empty")));
    }
    let n = ((t - s) / dt).round();
    if ((t - s) / dt - n).abs() > 1e-9 * n.max(1.0) {
        return Err(LabError::Domain(format!("step {dt} does not divide interval length {}", t - s)));
    }
    Ok(n as usize)
}

/// Exact Gaussian transition for constant diagonal noise.
pub fn sample_ou_exact(
    op: &SpectralOperator,
    set: &CoefficientSet,
    s: f64,
    t: f64,
    x: &[f64],
    stream: &mut PathStream,
    step: u64,
) -> Result<ModeVector> {
    if !set.noise.is_constant() {
        return Err(LabError::Unsupported("exact sampling needs constant noise; use simulate_ou".into()));
    }
    ensure_dim(op.dim(), x.len())?;
    let tau = t - s;
    if tau < 0.0 {
        return Err(LabError::Domain("t < s".into()));
    }
    if tau == 0.0 {
        return Ok(x.to_vec().into());
    }
    let mut xi = vec![0.0; x.len()];
    stream.normals(step, &mut xi);
    Ok(x.iter()
        .zip(op.eigenvalues())
        .zip(&set.noise.base)
        .zip(&xi)
        .map(|(((v, l), q), g)| (-l * tau).exp() * v + q * (-(-2.0 * l * tau).exp_m1() / (2.0 * l)).sqrt() * g)
        .collect::<Vec<_>>()
        .into())
}

/// Scratch buffers and per-step factors for exponential-Euler stepping.
pub(crate) struct Walker<'a> {
    op: &'a SpectralOperator,
    set: &'a CoefficientSet,
    h: f64,
    pub decay: Vec<f64>,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub dw: Vec<f64>,
}

impl<'a> Walker<'a> {
    pub fn new(op: &'a SpectralOperator, set: &'a CoefficientSet) -> Self {
        let d = op.dim();
        let mut q = vec![0.0; d];
        q.copy_from_slice(&set.noise.base);
        Self { op, set, h: f64::NAN, decay: vec![0.0; d], q, dq: vec![0.0; d], dw: vec![0.0; d] }
    }

    pub fn set_step(&mut self, h: f64) {
        if h != self.h {
            self.h = h;
            self.decay = self.op.decay_factors(h);
        }
    }

    /// Draws the increments of step `k` and evaluates `Q` at `z`.
    pub fn prepare(&mut self, t: f64, z: &[f64], stream: &mut PathStream, k: u64) -> Result<()> {
        stream.increments(k, self.h, &mut self.dw);
        if !self.set.noise.is_constant() {
            self.set.noise_diag(t, z, &mut self.q);
            let (lo, hi) = self.q.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v * v), hi.max(v * v)));
            if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
                return Err(LabError::NotInvertible(format!("cond(QQ*) = {} at t = {t}", hi / lo)));
            }
        }
        Ok(())
    }

    /// `z ← e^{AΔ}(z + Q ΔW)` using the prepared increments.
    pub fn advance(&self, z: &mut [f64]) {
        for n in 0..z.len() {
            z[n] = self.decay[n] * (z[n] + self.q[n] * self.dw[n]);
        }
    }

    /// `⟨Q^{-1} v, ΔW⟩` at the prepared point.
    pub fn bismut_increment(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.q).zip(&self.dw).map(|((a, q), w)| a / q * w).sum()
    }

    /// `j ← e^{AΔ}(j + (∇_j Q)(z) ΔW)`; call before advancing `z`.
    pub fn advance_flow(&mut self, z: &[f64], j: &mut [f64]) {
        if self.set.noise.is_constant() {
            for n in 0..j.len() {
                j[n] *= self.decay[n];
            }
            return;
        }
        self.set.noise.derivative_into(z, j, &mut self.dq);
        for n in 0..j.len() {
            j[n] = self.decay[n] * (j[n] + self.dq[n] * self.dw[n]);
        }
    }
}

/// Monte Carlo engine for the reference process on a uniform grid of step `dt`.
#[derive(Clone, Copy)]
pub struct OuEngine<'a> {
    pub op: &'a SpectralOperator,
    pub set: &'a CoefficientSet,
    pub dt: f64,
}

impl<'a> OuEngine<'a> {
    pub fn new(op: &'a SpectralOperator, set: &'a CoefficientSet, dt: f64) -> Result<Self> {
        ensure_positive("time step", dt)?;
        ensure_dim(op.dim(), set.dim())?;
        Ok(Self { op, set, dt })
    }

    fn check_flows(&self) -> Result<()> {
        if self.set.noise_differentiable() {
            Ok(())
        } else {
            Err(LabError::Unsupported("derivative flows need a differentiable noise coefficient".into()))
        }
    }

    pub fn simulate_ou(
        &self,
        s: f64,
        t: f64,
        x: &[f64],
        key: &StreamKey,
        path: u64,
        flows: Flows,
        eta: &[f64],
        eta_prime: &[f64],
    ) -> Result<OuPath> {
        let d = self.op.dim();
        ensure_dim(d, x.len())?;
        let steps = step_count(s, t, self.dt)?;
        if flows != Flows::None {
            self.check_flows()?;
            ensure_dim(d, eta.len())?;
        }
        if flows == Flows::Second {
            ensure_dim(d, eta_prime.len())?;
        }
        let mut w = Walker::new(self.op, self.set);
        w.set_step(self.dt);
        let mut stream = key.path(path);
        let mut z = x.to_vec();
        let mut j = eta.to_vec();
        let mut jp = eta_prime.to_vec();
        let mut g = vec![0.0; d];
        let mut ddq = vec![0.0; d];
        let mut out = OuPath {
            times: vec![s],
            states: vec![z.clone().into()],
            increments: Vec::with_capacity(steps),
            first_flow: (flows != Flows::None).then(|| vec![j.clone().into()]),
            first_flow_prime: (flows == Flows::Second).then(|| vec![jp.clone().into()]),
            second_flow: (flows == Flows::Second).then(|| vec![g.clone().into()]),
        };
        for k in 0..steps {
            let tk = s + k as f64 * self.dt;
            w.prepare(tk, &z, &mut stream, k as u64)?;
            if flows == Flows::Second {
                self.set.noise.second_derivative_into(&z, &j, &jp, &mut ddq);
                let mut dg = vec![0.0; d];
                self.set.noise.derivative_into(&z, &g, &mut dg);
                for n in 0..d {
                    g[n] = w.decay[n] * (g[n] + (dg[n] + ddq[n]) * w.dw[n]);
                }
                w.advance_flow(&z, &mut jp);
            }
            if flows != Flows::None {
                w.advance_flow(&z, &mut j);
            }
            w.advance(&mut z);
            out.times.push(s + (k + 1) as f64 * self.dt);
            out.states.push(z.clone().into());
            out.increments.push(w.dw.clone());
            if let Some(f) = out.first_flow.as_mut() {
                f.push(j.clone().into());
            }
            if let Some(f) = out.first_flow_prime.as_mut() {
                f.push(jp.clone().into());
            }
            if let Some(f) = out.second_flow.as_mut() {
                f.push(g.clone().into());
            }
        }
        Ok(out)
    }

    /// Runs `n` paths from `x` over `[s, t]` and records `k` functionals of the terminal state.
    pub fn terminal_table<G>(&self, s: f64, t: f64, x: &[f64], n: usize, key: &StreamKey, k: usize, g: G) -> Result<Vec<f64>>
    where
        G: Fn(&[f64], &mut [f64]) + Sync,
    {
        ensure_dim(self.op.dim(), x.len())?;
        if n == 0 {
            return Err(LabError::Domain("path count must be positive".into()));
        }
        let steps = step_count(s, t, self.dt)?;
        let failure = std::sync::Mutex::new(None);
        let table = sample_paths(n, k, |i, row| {
            let mut w = Walker::new(self.op, self.set);
            w.set_step(self.dt);
            let mut stream = key.path(i);
            let mut z = x.to_vec();
            for step in 0..steps {
                if let Err(e) = w.prepare(s + step as f64 * self.dt, &z, &mut stream, step as u64) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
                w.advance(&mut z);
            }
            g(&z, row);
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(table),
        }
    }

    /// `P⁰_{s,t} f(x)`.
    pub fn semigroup_eval(&self, s: f64, t: f64, f: &dyn ScalarField, x: &[f64], n: usize, key: &StreamKey) -> Result<Estimate> {
        let table = self.terminal_table(s, t, x, n, key, 1, |z, row| row[0] = f.eval(z))?;
        Ok(Estimate::from_samples(&table, key.seed))
    }

    /// Per-path Bismut samples `f(Z_t)·∫⟨Q^{-1}∇_η Z, dW⟩/(t − s)`, plus `f(Z_t)` itself.
    fn bismut_table(&self, s: f64, t: f64, f: &dyn ScalarField, x: &[f64], eta: &[f64], n: usize, key: &StreamKey) -> Result<Vec<f64>> {
        let d = self.op.dim();
        ensure_dim(d, x.len())?;
        ensure_dim(d, eta.len())?;
        if !(t > s) {
            return Err(LabError::Domain("Bismut estimator needs t > s".into()));
        }
        if n == 0 {
            return Err(LabError::Domain("path count must be positive".into()));
        }
        self.check_flows()?;
        let steps = step_count(s, t, self.dt)?;
        let failure = std::sync::Mutex::new(None);
        let table = sample_paths(n, 2, |i, row| {
            let mut w = Walker::new(self.op, self.set);
            w.set_step(self.dt);
            let mut stream = key.path(i);
            let mut z = x.to_vec();
            let mut j = eta.to_vec();
            let mut weight = 0.0;
            for step in 0..steps {
                if let Err(e) = w.prepare(s + step as f64 * self.dt, &z, &mut stream, step as u64) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
                weight += w.bismut_increment(&j);
                w.advance_flow(&z, &mut j);
                w.advance(&mut z);
            }
            let fz = f.eval(&z);
            row[0] = fz * weight / (t - s);
            row[1] = fz;
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(table),
        }
    }

    /// `∇_η P⁰_{s,t} f(x)` by the Bismut formula.
    pub fn bismut_gradient(&self, s: f64, t: f64, f: &dyn ScalarField, x: &[f64], eta: &[f64], n: usize, key: &StreamKey) -> Result<Estimate> {
        let table = self.bismut_table(s, t, f, x, eta, n, key)?;
        Ok(column_estimates(&table, 2, key.seed)[0])
    }

    /// `∇_{η'}∇_η P⁰_{s,t} f(x)` by splitting at the midpoint; the inner value and gradient at
    /// the midpoint are nested estimates with `inner` paths each.
    #[allow(clippy::too_many_arguments)]
    pub fn bismut_hessian(
        &self,
        s: f64,
        t: f64,
        f: &dyn ScalarField,
        x: &[f64],
        eta: &[f64],
        eta_prime: &[f64],
        outer: usize,
        inner: usize,
        key: &StreamKey,
    ) -> Result<Estimate> {
        let d = self.op.dim();
        ensure_dim(d, eta.len())?;
        ensure_dim(d, eta_prime.len())?;
        if !(t > s) {
            return Err(LabError::Domain("Hessian estimator needs t > s".into()));
        }
        if outer == 0 || inner == 0 {
            return Err(LabError::Domain("path counts must be positive".into()));
        }
        self.check_flows()?;
        let mid = 0.5 * (s + t);
        let half = step_count(s, mid, self.dt)?;
        let outer_key = key.child(1);
        let inner_root = key.child(2);
        let failure = std::sync::Mutex::new(None);
        let samples = sample_paths(outer, 1, |i, row| {
            let mut w = Walker::new(self.op, self.set);
            w.set_step(self.dt);
            let mut stream = outer_key.path(i);
            let mut z = x.to_vec();
            let mut j = eta.to_vec();
            let mut jp = eta_prime.to_vec();
            let mut g = vec![0.0; d];
            let mut dg = vec![0.0; d];
            let mut ddq = vec![0.0; d];
            let mut dqp = vec![0.0; d];
            let (mut i1, mut i2, mut i3) = (0.0, 0.0, 0.0);
            for step in 0..half {
                if let Err(e) = w.prepare(s + step as f64 * self.dt, &z, &mut stream, step as u64) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
                i1 += w.bismut_increment(&j);
                i3 += w.bismut_increment(&g);
                if !self.set.noise.is_constant() {
                    // ∇_{J'}(Q^{-1}) = −Q^{-1}(∇_{J'}Q)Q^{-1}
                    self.set.noise.derivative_into(&z, &jp, &mut dqp);
                    i2 -= (0..d).map(|n| dqp[n] * j[n] / (w.q[n] * w.q[n]) * w.dw[n]).sum::<f64>();
                    self.set.noise.second_derivative_into(&z, &j, &jp, &mut ddq);
                    self.set.noise.derivative_into(&z, &g, &mut dg);
                    for n in 0..d {
                        g[n] = w.decay[n] * (g[n] + (dg[n] + ddq[n]) * w.dw[n]);
                    }
                }
                w.advance_flow(&z, &mut jp);
                w.advance_flow(&z, &mut j);
                w.advance(&mut z);
            }
            let sub = inner_root.child(i);
            match self.bismut_table(mid, t, f, &z, &jp, inner, &sub) {
                Ok(tab) => {
                    let est = column_estimates(&tab, 2, key.seed);
                    let (grad, value) = (est[0].estimate, est[1].estimate);
                    row[0] = 2.0 * (grad * i1 + value * (i2 + i3)) / (t - s);
                }
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                }
            }
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(Estimate::from_samples(&samples, key.seed)),
        }
    }

    /// `∫_s^t e^{-λ(r-s)} P⁰_{s,r} f_r(x) dr` by the composite midpoint rule with `cells` cells.
    #[allow(clippy::too_many_arguments)]
    pub fn resolvent_eval<F>(&self, lambda: f64, s: f64, t: f64, f: F, x: &[f64], cells: usize, n: usize, key: &StreamKey) -> Result<Estimate>
    where
        F: Fn(f64, &[f64]) -> f64 + Sync,
    {
        if !(lambda >= 0.0) {
            return Err(LabError::Domain("resolvent parameter must be nonnegative".into()));
        }
        if !(t >= s) || cells == 0 || n == 0 {
            return Err(LabError::Domain("resolvent needs t ≥ s and positive cell and path counts".into()));
        }
        ensure_dim(self.op.dim(), x.len())?;
        let hr = (t - s) / cells as f64;
        let nodes: Vec<f64> = (0..cells).map(|j| s + (j as f64 + 0.5) * hr).collect();
        let failure = std::sync::Mutex::new(None);
        let samples = sample_paths(n, 1, |i, row| {
            let mut w = Walker::new(self.op, self.set);
            let mut stream = key.path(i);
            let mut z = x.to_vec();
            let mut now = s;
            let mut counter = 0u64;
            let mut acc = 0.0;
            for &r in &nodes {
                let sub = ((r - now) / self.dt).ceil().max(1.0) as usize;
                w.set_step((r - now) / sub as f64);
                for _ in 0..sub {
                    if let Err(e) = w.prepare(now, &z, &mut stream, counter) {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                    w.advance(&mut z);
                    counter += 1;
                    now += w.h;
                }
                now = r;
                acc += hr * (-lambda * (r - s)).exp() * f(r, &z);
            }
            row[0] = acc;
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(Estimate::from_samples(&samples, key.seed)),
        }
    }

    /// `max_k E|∇_η Z_{s,t_k}|^2 / |η|^2` over the grid, a sampled moment certificate for the
    /// first derivative flow.
    pub fn flow_moment_bound(&self, s: f64, t: f64, x: &[f64], eta: &[f64], n: usize, key: &StreamKey) -> Result<f64> {
        self.check_flows()?;
        let steps = step_count(s, t, self.dt)?;
        let eta_sq: f64 = eta.iter().map(|v| v * v).sum();
        let table = sample_paths(n, steps + 1, |i, row| {
            let mut w = Walker::new(self.op, self.set);
            w.set_step(self.dt);
            let mut stream = key.path(i);
            let mut z = x.to_vec();
            let mut j = eta.to_vec();
            row[0] = eta_sq;
            for step in 0..steps {
                let _ = w.prepare(s + step as f64 * self.dt, &z, &mut stream, step as u64);
                w.advance_flow(&z, &mut j);
                w.advance(&mut z);
                row[step + 1] = j.iter().map(|v| v * v).sum();
            }
        });
        Ok(column_estimates(&table, steps + 1, key.seed)
            .iter()
            .map(|e| e.estimate / eta_sq)
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Preset;
    use crate::rng::Module;
    use crate::stats::Estimate;

    fn setup(preset: Preset, d: usize) -> (SpectralOperator, CoefficientSet) {
        (SpectralOperator::dirichlet(d).unwrap(), preset.build(d).unwrap())
    }

    fn key(e: u64) -> StreamKey {
        StreamKey::new(2024, Module::Ou, e)
    }

    /// Mean and variance estimates with standard errors for the variance.
    fn moments(samples: &[f64]) -> (Estimate, f64, f64) {
        let m = Estimate::from_samples(samples, 0);
        let n = samples.len() as f64;
        let sq: Vec<f64> = samples.iter().map(|v| (v - m.estimate).powi(2)).collect();
        let v = Estimate::from_samples(&sq, 0);
        (m, v.estimate * n / (n - 1.0), v.std_error)
    }

    #[test]
    fn exact_sampler_moments() {
        let (op, set) = setup(Preset::Baseline, 3);
        let x = [0.8, -0.4, 0.2];
        let tau = 0.3;
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|i| sample_ou_exact(&op, &set, 0.0, tau, &x, &mut key(1).path(i), 0).unwrap().into_inner())
            .collect();
        for n in 0..3 {
            let col: Vec<f64> = draws.iter().map(|z| z[n]).collect();
            let (m, v, v_se) = moments(&col);
            let l = op.eigenvalue(n);
            assert!(m.within((-l * tau).exp() * x[n], 4.0), "mode {n} mean");
            let want = -(-2.0 * l * tau).exp_m1() / (2.0 * l);
            assert!((v - want).abs() <= 4.0 * v_se, "mode {n} var {v} vs {want}");
        }
        assert_eq!(sample_ou_exact(&op, &set, 0.5, 0.5, &x, &mut key(1).path(0), 0).unwrap().0, x.to_vec());
        let mult = Preset::Multiplicative.build(3).unwrap();
        assert!(matches!(sample_ou_exact(&op, &mult, 0.0, 1.0, &x, &mut key(1).path(0), 0), Err(LabError::Unsupported(_))));
    }

    #[test]
    fn stationary_limit() {
        let op = SpectralOperator::new(crate::EigenLaw::Explicit(vec![1.0]), 1, 0.4).unwrap();
        let set = Preset::Baseline.build(1).unwrap();
        let col: Vec<f64> =
            (0..100_000).map(|i| sample_ou_exact(&op, &set, 0.0, 40.0, &[3.0], &mut key(2).path(i), 0).unwrap()[0]).collect();
        let (m, v, v_se) = moments(&col);
        assert!(m.within(0.0, 4.0));
        assert!((v - 0.5).abs() <= 4.0 * v_se);
    }

    #[test]
    fn euler_matches_exact_law_on_resolved_mode() {
        let (op, set) = setup(Preset::Baseline, 1);
        let eng = OuEngine::new(&op, &set, 1.0 / 4096.0).unwrap();
        let tab = eng.terminal_table(0.0, 0.25, &[0.5], 100_000, &key(3), 1, |z, r| r[0] = z[0]).unwrap();
        let (m, v, v_se) = moments(&tab);
        let l = op.eigenvalue(0);
        assert!(m.within((-l * 0.25).exp() * 0.5, 4.0));
        let want = -(-2.0 * l * 0.25).exp_m1() / (2.0 * l);
        assert!((v - want).abs() <= 4.0 * v_se, "{v} vs {want}");
    }

    #[test]
    fn semigroup_closed_forms() {
        let (op, set) = setup(Preset::Baseline, 4);
        let eng = OuEngine::new(&op, &set, 1.0 / 256.0).unwrap();
        let x = [0.7, 0.1, 0.0, -0.3];
        let one = eng.semigroup_eval(0.0, 0.5, &|_: &[f64]| 1.0, &x, 1000, &key(4)).unwrap();
        assert_eq!((one.estimate, one.std_error), (1.0, 0.0));
        let lin = eng.semigroup_eval(0.0, 0.125, &|z: &[f64]| z[0], &x, 50_000, &key(5)).unwrap();
        let l = op.eigenvalue(0);
        assert!(lin.within((-l * 0.125).exp() * 0.7, 4.0));
        let fine = OuEngine::new(&op, &set, 1.0 / 2048.0).unwrap();
        let sq = fine.semigroup_eval(0.0, 0.125, &|z: &[f64]| z[0] * z[0], &x, 50_000, &key(6)).unwrap();
        let want = ((-l * 0.125).exp() * 0.7).powi(2) - (-2.0 * l * 0.125).exp_m1() / (2.0 * l);
        assert!(sq.within(want, 4.0), "{sq:?} vs {want}");
        assert!(eng.semigroup_eval(0.0, 0.5, &|_: &[f64]| 1.0, &x, 0, &key(4)).is_err());
    }

    #[test]
    fn path_replay_and_flows() {
        let (op, set) = setup(Preset::Multiplicative, 4);
        let eng = OuEngine::new(&op, &set, 1.0 / 64.0).unwrap();
        let x = [0.3, -0.2, 0.1, 0.0];
        let eta = [1.0, 0.5, 0.0, 0.0];
        let etap = [0.0, 1.0, 0.0, 0.0];
        let a = eng.simulate_ou(0.0, 0.5, &x, &key(7), 3, Flows::Second, &eta, &etap).unwrap();
        let b = eng.simulate_ou(0.0, 0.5, &x, &key(7), 3, Flows::Second, &eta, &etap).unwrap();
        assert_eq!(a, b);
        let decay = op.decay_factors(1.0 / 64.0);
        let mut q = vec![0.0; 4];
        for k in 0..a.increments.len() {
            set.noise_diag(0.0, &a.states[k], &mut q);
            for n in 0..4 {
                let want = decay[n] * (a.states[k][n] + q[n] * a.increments[k][n]);
                assert_eq!(a.states[k + 1][n], want);
            }
        }
        assert!(a.second_flow.unwrap().last().unwrap().norm() > 0.0);

        let (op, base) = setup(Preset::Baseline, 4);
        let eng = OuEngine::new(&op, &base, 1.0 / 64.0).unwrap();
        let p = eng.simulate_ou(0.0, 0.5, &x, &key(8), 0, Flows::First, &eta, &etap).unwrap();
        let want = op.semigroup_apply(0.5, &eta).unwrap();
        for (u, v) in p.first_flow.unwrap().last().unwrap().iter().zip(want.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
        assert!(eng.simulate_ou(0.0, 0.5, &x, &key(8), 0, Flows::None, &eta, &etap).is_ok());
        assert!(OuEngine::new(&op, &base, 0.3).unwrap().simulate_ou(0.0, 0.5, &x, &key(8), 0, Flows::None, &eta, &etap).is_err());
        assert!(OuEngine::new(&op, &base, 0.0).is_err());
    }

    #[test]
    fn bismut_closed_forms() {
        let (op, set) = setup(Preset::Baseline, 1);
        let eng = OuEngine::new(&op, &set, 1.0 / 128.0).unwrap();
        let g = eng.bismut_gradient(0.0, 0.25, &|z: &[f64]| z[0], &[0.4], &[1.5], 50_000, &key(9)).unwrap();
        assert!(g.within((-op.eigenvalue(0) * 0.25).exp() * 1.5, 4.0), "{g:?}");
        let c = eng.bismut_gradient(0.0, 0.25, &|_: &[f64]| 2.0, &[0.4], &[1.0], 50_000, &key(10)).unwrap();
        assert!(c.within(0.0, 4.0));
        assert!(eng.bismut_gradient(0.25, 0.25, &|_: &[f64]| 2.0, &[0.4], &[1.0], 10, &key(10)).is_err());
    }

    #[test]
    fn bismut_matches_common_random_number_differences() {
        let (op, set) = setup(Preset::Multiplicative, 4);
        let eng = OuEngine::new(&op, &set, 1.0 / 128.0).unwrap();
        let f = |z: &[f64]| (1.5 * z[0] + 0.5 * z[1]).tanh();
        let x = [0.2, 0.4, -0.1, 0.0];
        let eta = [1.0, 0.0, 0.0, 0.0];
        let k = key(11);
        let g = eng.bismut_gradient(0.0, 0.25, &f, &x, &eta, 40_000, &k).unwrap();
        let h = 1e-3;
        let xp: Vec<f64> = x.iter().zip(&eta).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&eta).map(|(a, b)| a - h * b).collect();
        let fk = key(12);
        let up = eng.terminal_table(0.0, 0.25, &xp, 40_000, &fk, 1, |z, r| r[0] = f(z)).unwrap();
        let dn = eng.terminal_table(0.0, 0.25, &xm, 40_000, &fk, 1, |z, r| r[0] = f(z)).unwrap();
        let diff: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let fd = Estimate::from_samples(&diff, 0);
        assert!((g.estimate - fd.estimate).abs() <= 3.0 * g.combined_se(&fd), "{g:?} vs {fd:?}");
    }

    #[test]
    fn hessian_closed_forms() {
        let (op, set) = setup(Preset::Baseline, 1);
        let eng = OuEngine::new(&op, &set, 1.0 / 64.0).unwrap();
        let l = op.eigenvalue(0);
        let h = eng.bismut_hessian(0.0, 0.125, &|z: &[f64]| z[0] * z[0], &[0.3], &[1.0], &[1.0], 4000, 64, &key(13)).unwrap();
        let want = 2.0 * (-2.0 * l * 0.125).exp();
        assert!(h.within(want, 4.0), "{h:?} vs {want}");
        assert!(h.std_error < 0.2 * want);
        let lin = eng.bismut_hessian(0.0, 0.125, &|z: &[f64]| z[0], &[0.3], &[1.0], &[1.0], 4000, 64, &key(14)).unwrap();
        assert!(lin.within(0.0, 4.0), "{lin:?}");
    }

    #[test]
    fn hessian_multiplicative_matches_differences_of_gradient() {
        let (op, set) = setup(Preset::Multiplicative, 2);
        let eng = OuEngine::new(&op, &set, 1.0 / 64.0).unwrap();
        let f = |z: &[f64]| (1.5 * z[0]).tanh();
        let x = [0.3, 0.0];
        let e1 = [1.0, 0.0];
        let h = eng.bismut_hessian(0.0, 0.125, &f, &x, &e1, &e1, 4000, 64, &key(15)).unwrap();
        let step = 0.05;
        let gp = eng.bismut_gradient(0.0, 0.125, &f, &[0.3 + step, 0.0], &e1, 100_000, &key(16)).unwrap();
        let gm = eng.bismut_gradient(0.0, 0.125, &f, &[0.3 - step, 0.0], &e1, 100_000, &key(16)).unwrap();
        let fd = (gp.estimate - gm.estimate) / (2.0 * step);
        let fd_se = gp.combined_se(&gm) / (2.0 * step);
        assert!((h.estimate - fd).abs() <= 4.0 * h.std_error.hypot(fd_se), "{h:?} vs {fd} ± {fd_se}");
    }

    #[test]
    fn resolvent_closed_forms() {
        let (op, set) = setup(Preset::Baseline, 2);
        let eng = OuEngine::new(&op, &set, 1.0 / 256.0).unwrap();
        let lam = 4.0;
        let r = eng.resolvent_eval(lam, 0.0, 0.5, |_, _| 1.0, &[0.0, 0.0], 64, 10, &key(17)).unwrap();
        let want = -(-lam * 0.5f64).exp_m1() / lam;
        assert!((r.estimate - want).abs() < 1e-4 * want);
        let r0 = eng.resolvent_eval(0.0, 0.0, 0.5, |_, _| 3.0, &[0.0, 0.0], 64, 10, &key(17)).unwrap();
        assert!((r0.estimate - 1.5).abs() < 1e-12);
        let l1 = op.eigenvalue(0);
        let r1 = eng.resolvent_eval(lam, 0.0, 0.5, |_, z| z[0], &[1.0, 0.0], 64, 20_000, &key(18)).unwrap();
        let want = -(-(lam + l1) * 0.5f64).exp_m1() / (lam + l1);
        let quad_err = want * ((lam + l1) * 0.5 / 64.0).powi(2) / 24.0;
        assert!((r1.estimate - want).abs() <= 3.0 * r1.std_error + quad_err, "{r1:?} vs {want}");
    }

    #[test]
    fn flow_moments_and_convolution_variance() {
        let (op, set) = setup(Preset::Multiplicative, 4);
        let eng = OuEngine::new(&op, &set, 1.0 / 128.0).unwrap();
        let c = eng.flow_moment_bound(0.0, 1.0, &[0.1, 0.2, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], 2000, &key(19)).unwrap();
        assert!(c.is_finite() && c <= 2.0, "{c}");

        let eps = op.trace_exponent();
        let qmax = set.noise.hs_norm_sq_bound().sqrt();
        let bound_sum: f64 = op.eigenvalues().iter().map(|l| l.powf(eps - 1.0)).sum();
        for tau in [1.0 / 64.0, 0.25, 1.0] {
            let e = eng
                .semigroup_eval(0.0, tau, &|z: &[f64]| z.iter().map(|v| v * v).sum(), &[0.0; 4], 5000, &key(20))
                .unwrap();
            let bound = qmax * qmax * 2f64.powf(eps) * bound_sum * tau.powf(eps);
            assert!(e.estimate <= bound, "tau {tau}: {} > {bound}", e.estimate);
        }
    }

    #[test]
    fn short_time_gradient_bound() {
        let (op, set) = setup(Preset::Baseline, 2);
        let eng = OuEngine::new(&op, &set, 1.0 / 512.0).unwrap();
        let f = |z: &[f64]| (2.0 * z[0]).cos();
        let mut fitted = Vec::new();
        for j in 2..7 {
            let tau = 0.5f64.powi(j);
            let g = eng.bismut_gradient(0.0, tau, &f, &[0.4, 0.0], &[1.0, 0.0], 20_000, &key(21)).unwrap();
            let p2 = eng.semigroup_eval(0.0, tau, &|z: &[f64]| f(z).powi(2), &[0.4, 0.0], 20_000, &key(22)).unwrap();
            fitted.push(g.estimate.powi(2) * tau / p2.estimate);
        }
        assert!(fitted.iter().all(|c| *c <= 1.5), "{fitted:?}");
    }
}
