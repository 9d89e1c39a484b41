//! Exponential-Euler simulation of the full equation and of its regularized transform, with the
//! pathwise experiments built on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{ensure_dim, LabError, Result};
use crate::ou::step_count;
use crate::regularization::{theta_invert_into, UField};
use crate::rng::{PathStream, StreamKey};
use crate::spectral::{distance, norm, ModeVector, SpectralOperator};
use crate::stats::{median, quantile, sample_paths};

/// `|X|` beyond which a path is declared exploded.
pub const BLOW_UP: f64 = 1e8;

/// Tolerance of the `θ^{-1}` fixed point inside the transformed scheme.
pub const THETA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub times: Vec<f64>,
    pub states: Vec<ModeVector>,
    pub increments: Vec<Vec<f64>>,
    pub exploded: bool,
    pub exit_time: Option<f64>,
}

impl SolutionPath {
    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// CSV with columns `t, x0, x1, ...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.states.first().map_or(0, |s| s.len());
        let mut head = vec!["t".to_string()];
        head.extend((0..d).map(|n| format!("x{n}")));
        w.write_record(&head)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:e}")];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Brownian increments of one path on a grid of step `dt`, optionally obtained by summing
/// `2^coarsen` increments of a finer grid so that refinements stay coupled.
#[derive(Debug, Clone)]
pub struct IncrementSource {
    stream: PathStream,
    dt: f64,
    coarsen: u32,
    buf: Vec<f64>,
}

impl IncrementSource {
    pub fn new(key: &StreamKey, path: u64, dt: f64, coarsen: u32) -> Self {
        Self { stream: key.path(path), dt, coarsen, buf: Vec::new() }
    }

    pub fn fill(&mut self, k: usize, out: &mut [f64]) {
        if self.coarsen == 0 {
            self.stream.increments(k as u64, self.dt, out);
            return;
        }
        let factor = 1usize << self.coarsen;
        let fine_dt = self.dt / factor as f64;
        self.buf.resize(out.len(), 0.0);
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..factor {
            self.stream.increments((k * factor + j) as u64, fine_dt, &mut self.buf);
            for (o, b) in out.iter_mut().zip(&self.buf) {
                *o += b;
            }
        }
    }
}

/// Per-step factors `e^{-λ_n Δ}` and `(1 − e^{-λ_n Δ})/λ_n`.
struct StepFactors {
    decay: Vec<f64>,
    integ: Vec<f64>,
}

impl StepFactors {
    fn new(op: &SpectralOperator, dt: f64) -> Self {
        Self { decay: op.decay_factors(dt), integ: op.integrated_factors(dt) }
    }
}

fn check_state(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LabError::NonFinite(format!("state became non-finite at t = {t}")))
    }
}

/// Full equation `dX = (AX + B(X) + b(X))dt + Q(X)dW` by exponential Euler.
pub fn simulate_mild_with(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    source: &mut IncrementSource,
) -> Result<SolutionPath> {
    let d = op.dim();
    ensure_dim(d, x0.len())?;
    ensure_dim(d, set.dim())?;
    let steps = step_count(0.0, horizon, dt)?;
    let f = StepFactors::new(op, dt);
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut path = SolutionPath {
        times: vec![0.0],
        states: vec![x.clone().into()],
        increments: Vec::with_capacity(steps),
        exploded: false,
        exit_time: None,
    };
    for k in 0..steps {
        let t = k as f64 * dt;
        source.fill(k, &mut dw);
        drift.iter_mut().for_each(|v| *v = 0.0);
        set.add_regular(t, &x, 1.0, &mut drift);
        set.add_singular(t, &x, 1.0, &mut drift);
        set.noise_diag(t, &x, &mut q);
        for n in 0..d {
            x[n] = f.decay[n] * x[n] + f.integ[n] * drift[n] + f.decay[n] * q[n] * dw[n];
        }
        let tn = (k + 1) as f64 * dt;
        path.times.push(tn);
        path.increments.push(dw.clone());
        let size = norm(&x);
        if size >= BLOW_UP || (!size.is_finite() && !x.iter().any(|v| v.is_nan())) {
            path.states.push(x.clone().into());
            path.exploded = true;
            path.exit_time = Some(tn);
            return Ok(path);
        }
        check_state(&x, tn)?;
        path.states.push(x.clone().into());
    }
    Ok(path)
}

pub fn simulate_mild(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    key: &StreamKey,
    path: u64,
) -> Result<SolutionPath> {
    simulate_mild_with(op, set, x0, horizon, dt, &mut IncrementSource::new(key, path, dt, 0))
}

/// Regularized equation with drift `b̄ = {B + ∇_B u + (λ − A)u}∘θ^{-1}` and noise
/// `Q̄ = {(I + ∇u)Q}∘θ^{-1}`.
pub struct Transformed<'a> {
    pub op: &'a SpectralOperator,
    pub set: &'a CoefficientSet,
    pub u: &'a UField,
    pub lambda: f64,
}

/// Scratch state of one transformed path.
struct TransformedState {
    x: Vec<f64>,
    ubuf: Vec<f64>,
    drift: Vec<f64>,
    q: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Transformed<'a> {
    pub fn new(op: &'a SpectralOperator, set: &'a CoefficientSet, u: &'a UField, lambda: f64) -> Result<Self> {
        ensure_dim(op.dim(), set.dim())?;
        ensure_dim(op.dim(), u.dim)?;
        Ok(Self { op, set, u, lambda })
    }

    fn scratch(&self) -> TransformedState {
        let d = self.op.dim();
        TransformedState {
            x: vec![0.0; d],
            ubuf: vec![0.0; self.u.stride()],
            drift: vec![0.0; d],
            q: vec![0.0; d],
            noise: vec![0.0; d],
        }
    }

    /// One step of the level-`level` scheme; modes at or beyond `level` stay untouched.
    fn step(&self, t: f64, y: &mut [f64], dw: &[f64], f: &StepFactors, level: usize, s: &mut TransformedState) -> Result<()> {
        let (r, m) = (self.u.value_modes, self.u.lattice.modes);
        s.x.copy_from_slice(y);
        theta_invert_into(self.u, t, y, THETA_TOL, &mut s.ubuf, &mut s.x)?;
        self.u.eval_into(t, &s.x, &mut s.ubuf);
        let (val, jac) = s.ubuf.split_at(r);
        s.drift.iter_mut().for_each(|v| *v = 0.0);
        self.set.add_regular(t, &s.x, 1.0, &mut s.drift);
        self.set.noise_diag(t, &s.x, &mut s.q);
        for n in 0..level {
            s.noise[n] = s.q[n] * dw[n];
        }
        for n in 0..r.min(level) {
            let row = &jac[n * m..(n + 1) * m];
            let grad_b: f64 = row.iter().zip(&s.drift[..m]).map(|(a, b)| a * b).sum();
            let grad_q: f64 = (0..m).map(|k| row[k] * s.q[k] * dw[k]).sum();
            s.drift[n] += grad_b + (self.lambda + self.op.eigenvalue(n)) * val[n];
            s.noise[n] += grad_q;
        }
        for n in 0..level {
            y[n] = f.decay[n] * y[n] + f.integ[n] * s.drift[n] + f.decay[n] * s.noise[n];
        }
        Ok(())
    }

    /// Path of `X̄` from `y0` (pass `θ_0(x)` to compare with the full equation from `x`).
    pub fn simulate(&self, y0: &[f64], horizon: f64, dt: f64, source: &mut IncrementSource) -> Result<SolutionPath> {
        let d = self.op.dim();
        ensure_dim(d, y0.len())?;
        let steps = step_count(0.0, horizon, dt)?;
        let f = StepFactors::new(self.op, dt);
        let mut s = self.scratch();
        let mut y = y0.to_vec();
        let mut dw = vec![0.0; d];
        let mut path = SolutionPath {
            times: vec![0.0],
            states: vec![y.clone().into()],
            increments: Vec::with_capacity(steps),
            exploded: false,
            exit_time: None,
        };
        for k in 0..steps {
            let t = k as f64 * dt;
            source.fill(k, &mut dw);
            self.step(t, &mut y, &dw, &f, d, &mut s)?;
            let tn = (k + 1) as f64 * dt;
            check_state(&y, tn)?;
            path.times.push(tn);
            path.states.push(y.clone().into());
            path.increments.push(dw.clone());
        }
        Ok(path)
    }

    /// `θ_t^{-1}(y)`.
    pub fn pull_back(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        let mut buf = vec![0.0; self.u.stride()];
        let mut x = y.to_vec();
        theta_invert_into(self.u, t, y, THETA_TOL, &mut buf, &mut x)?;
        Ok(x)
    }
}

/// `max_k |X_k − RHS_k|` where `RHS` is the regularization representation of the path,
/// assembled with the same step factors as the scheme.
pub fn representation_residual(
    op: &SpectralOperator,
    set: &CoefficientSet,
    u: &UField,
    lambda: f64,
    path: &SolutionPath,
) -> Result<f64> {
    let d = op.dim();
    ensure_dim(d, u.dim)?;
    if path.states.len() < 2 || path.increments.len() + 1 != path.states.len() {
        return Err(LabError::Domain("path grid and increments do not match".into()));
    }
    let dt = path.dt();
    if path.times.last().copied().unwrap_or(0.0) > u.horizon * (1.0 + 1e-12) {
        return Err(LabError::Domain("path extends beyond the horizon of u".into()));
    }
    let (r, m) = (u.value_modes, u.lattice.modes);
    let f = StepFactors::new(op, dt);
    let mut ubuf = vec![0.0; u.stride()];
    let mut breg = vec![0.0; d];
    let mut q = vec![0.0; d];
    u.eval_into(0.0, &path.states[0], &mut ubuf);
    let mut rhs = path.states[0].to_vec();
    for n in 0..r {
        rhs[n] += ubuf[n];
    }
    let mut worst = 0.0f64;
    for k in 0..path.increments.len() {
        let t = path.times[k];
        let x = &path.states[k];
        u.eval_into(t, x, &mut ubuf);
        let (val, jac) = ubuf.split_at(r);
        breg.iter_mut().for_each(|v| *v = 0.0);
        set.add_regular(t, x, 1.0, &mut breg);
        set.noise_diag(t, x, &mut q);
        let dw = &path.increments[k];
        for n in 0..d {
            let mut drift = breg[n];
            let mut noise = q[n] * dw[n];
            if n < r {
                let row = &jac[n * m..(n + 1) * m];
                drift += (lambda + op.eigenvalue(n)) * val[n] + row.iter().zip(&breg[..m]).map(|(a, b)| a * b).sum::<f64>();
                noise += (0..m).map(|j| row[j] * q[j] * dw[j]).sum::<f64>();
            }
            rhs[n] = f.decay[n] * rhs[n] + f.integ[n] * drift + f.decay[n] * noise;
        }
        let xn = &path.states[k + 1];
        u.eval_into(path.times[k + 1], xn, &mut ubuf);
        let gap = (0..d)
            .map(|n| {
                let corr = if n < r { ubuf[n] } else { 0.0 };
                (xn[n] - (rhs[n] - corr)).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(gap);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStatistics {
    pub separation: f64,
    pub median: f64,
    pub mean: f64,
    pub q90: f64,
    pub max: f64,
    pub paths: usize,
}

impl GapStatistics {
    pub fn from_gaps(separation: f64, mut gaps: Vec<f64>) -> Self {
        let paths = gaps.len();
        let mean = gaps.iter().sum::<f64>() / paths as f64;
        let max = gaps.iter().copied().fold(0.0, f64::max);
        let q90 = quantile(&mut gaps, 0.9);
        Self { separation, median: median(&mut gaps), mean, q90, max, paths }
    }
}

/// Distribution of `sup_t |X_t − Y_t|` for solutions from `x0` and `y0` driven by the same
/// increments.
#[allow(clippy::too_many_arguments)]
pub fn pathwise_uniqueness_experiment(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x0: &[f64],
    y0: &[f64],
    horizon: f64,
    dt: f64,
    paths: usize,
    key: &StreamKey,
) -> Result<GapStatistics> {
    let failure = std::sync::Mutex::new(None);
    let gaps = sample_paths(paths, 1, |i, row| {
        let run = |start: &[f64]| simulate_mild(op, set, start, horizon, dt, key, i);
        match (run(x0), run(y0)) {
            (Ok(a), Ok(b)) => {
                row[0] = a.states.iter().zip(&b.states).map(|(p, q)| distance(p, q)).fold(0.0, f64::max);
            }
            (Err(e), _) | (_, Err(e)) => {
                failure.lock().unwrap().get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(GapStatistics::from_gaps(distance(x0, y0), gaps))
}

/// Strong error `E sup_t |X^{Δ} − X^{Δ/2}|` between consecutive refinements with coupled
/// increments; entry `j` compares step `dt/2^j` with `dt/2^{j+1}`.
pub fn refinement_errors(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    refinements: u32,
    paths: usize,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    let failure = std::sync::Mutex::new(None);
    let table = sample_paths(paths, refinements as usize, |i, row| {
        let level = |j: u32| {
            let h = dt / (1u64 << j) as f64;
            simulate_mild_with(op, set, x0, horizon, h, &mut IncrementSource::new(key, i, h, refinements - j))
        };
        let mut prev = match level(0) {
            Ok(p) => p,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        };
        for j in 0..refinements {
            let next = match level(j + 1) {
                Ok(p) => p,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            };
            row[j as usize] =
                prev.states.iter().enumerate().map(|(k, s)| distance(s, &next.states[2 * k])).fold(0.0, f64::max);
            prev = next;
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let k = refinements as usize;
    Ok((0..k).map(|j| crate::stats::column(&table, k, j).iter().sum::<f64>() / paths as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinRow {
    pub level: usize,
    /// `∫_0^T E|X̄_t − X̄^{(n)}_t|^2 dt`.
    pub full_error: f64,
    pub full_se: f64,
    /// `∫_0^T E|π_n X̄_t − X̄^{(n)}_t|^2 dt`.
    pub projected_error: f64,
    pub projected_se: f64,
}

/// Galerkin truncations of the regularized equation driven by shared increments.
#[allow(clippy::too_many_arguments)]
pub fn galerkin_study(
    tr: &Transformed,
    y0: &[f64],
    horizon: f64,
    dt: f64,
    levels: &[usize],
    paths: usize,
    key: &StreamKey,
) -> Result<Vec<GalerkinRow>> {
    let d = tr.op.dim();
    ensure_dim(d, y0.len())?;
    if levels.iter().any(|n| *n == 0 || *n > d) {
        return Err(LabError::Domain(format!("Galerkin levels must lie in 1..={d}")));
    }
    let steps = step_count(0.0, horizon, dt)?;
    let f = StepFactors::new(tr.op, dt);
    let nl = levels.len();
    let failure = std::sync::Mutex::new(None);
    let table = sample_paths(paths, 2 * nl, |i, row| {
        let mut source = IncrementSource::new(key, i, dt, 0);
        let mut s = tr.scratch();
        let mut full = y0.to_vec();
        let mut trunc: Vec<Vec<f64>> =
            levels.iter().map(|&n| y0.iter().enumerate().map(|(j, v)| if j < n { *v } else { 0.0 }).collect()).collect();
        let mut dw = vec![0.0; d];
        let mut prev = vec![(0.0, 0.0); nl];
        let errs = |full: &[f64], tr: &[f64], n: usize| {
            let proj: f64 = (0..n).map(|j| (full[j] - tr[j]).powi(2)).sum();
            let tail: f64 = (n..d).map(|j| full[j].powi(2)).sum();
            (proj + tail, proj)
        };
        for (l, &n) in levels.iter().enumerate() {
            prev[l] = errs(&full, &trunc[l], n);
        }
        for k in 0..steps {
            let t = k as f64 * dt;
            source.fill(k, &mut dw);
            if let Err(e) = tr.step(t, &mut full, &dw, &f, d, &mut s) {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
            for (l, &n) in levels.iter().enumerate() {
                if let Err(e) = tr.step(t, &mut trunc[l], &dw, &f, n, &mut s) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
                let now = errs(&full, &trunc[l], n);
                row[2 * l] += 0.5 * dt * (prev[l].0 + now.0);
                row[2 * l + 1] += 0.5 * dt * (prev[l].1 + now.1);
                prev[l] = now;
            }
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let est = crate::stats::column_estimates(&table, 2 * nl, key.seed);
    Ok(levels
        .iter()
        .enumerate()
        .map(|(l, &n)| GalerkinRow {
            level: n,
            full_error: est[2 * l].estimate,
            full_se: est[2 * l].std_error,
            projected_error: est[2 * l + 1].estimate,
            projected_se: est[2 * l + 1].std_error,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplosionReport {
    /// Largest `|Y_t|^2 − Ψ^{-1}(Ψ(α_t) + t)` over paths and grid times.
    pub max_violation: f64,
    pub violations: usize,
    pub explosions: usize,
    pub paths: usize,
}

/// Non-explosion certificate: tracks `Y = X − ξ` against the Bihari bound built from the
/// declared growth data.
pub fn explosion_monitor(
    op: &SpectralOperator,
    set: &CoefficientSet,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    paths: usize,
    key: &StreamKey,
) -> Result<ExplosionReport> {
    let growth = set
        .growth
        .as_ref()
        .ok_or_else(|| LabError::Unsupported("explosion monitor needs declared growth data (Φ, h)".into()))?;
    if growth.bihari(1.0).is_none() {
        return Err(LabError::Unsupported("Bihari bound needs Φ affine with Φ(0) > 0".into()));
    }
    let d = op.dim();
    let decay = op.decay_factors(dt);
    let x0_sq = norm(x0).powi(2);
    let failure = std::sync::Mutex::new(None);
    let table = sample_paths(paths, 3, |i, row| {
        let path = match simulate_mild(op, set, x0, horizon, dt, key, i) {
            Ok(p) => p,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        };
        let mut xi = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut alpha = x0_sq;
        let mut h_prev = growth.h.eval(0.0);
        let mut worst = f64::NEG_INFINITY;
        let mut count = 0.0;
        for k in 0..path.increments.len() {
            set.noise_diag(path.times[k], &path.states[k], &mut q);
            for n in 0..d {
                xi[n] = decay[n] * (xi[n] + q[n] * path.increments[k][n]);
            }
            let h_now = growth.h.eval(norm(&xi));
            alpha += dt * (h_prev + h_now);
            h_prev = h_now;
            let t = path.times[k + 1];
            let y_sq: f64 = path.states[k + 1].iter().zip(&xi).map(|(a, b)| (a - b).powi(2)).sum();
            let psi = growth.bihari(alpha).unwrap_or(f64::INFINITY);
            let bound = growth.bihari_inverse(psi + t).unwrap_or(f64::INFINITY);
            let v = y_sq - bound;
            worst = worst.max(v);
            if v > 0.0 {
                count += 1.0;
            }
        }
        row[0] = worst;
        row[1] = count;
        row[2] = if path.exploded { 1.0 } else { 0.0 };
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let col = |j| crate::stats::column(&table, 3, j);
    Ok(ExplosionReport {
        max_violation: col(0).into_iter().fold(f64::NEG_INFINITY, f64::max),
        violations: col(1).iter().sum::<f64>() as usize,
        explosions: col(2).iter().sum::<f64>() as usize,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Preset, RegularDrift};
    use crate::regularization::{solve_u, theta_apply, USolverConfig};
    use crate::rng::Module;

    fn key(e: u64) -> StreamKey {
        StreamKey::new(17, Module::Mild, e)
    }

    fn small() -> USolverConfig {
        USolverConfig { time_nodes: 5, points: 9, paths: 32, cells: 16, refine: 2, ..USolverConfig::default() }
    }

    #[test]
    fn free_equation_matches_exact_moments() {
        let op = SpectralOperator::dirichlet(3).unwrap();
        let set = Preset::Baseline.build(3).unwrap();
        let x0 = [1.0, -0.5, 0.25];
        let (t, dt, n) = (0.25, 1.0 / 4096.0, 4000);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for i in 0..n {
            let p = simulate_mild(&op, &set, &x0, t, dt, &key(0), i).unwrap();
            let x = p.states.last().unwrap();
            for j in 0..3 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        for j in 0..3 {
            let lam = op.eigenvalue(j);
            let mean = (-lam * t).exp() * x0[j];
            let var = -(-2.0 * lam * t).exp_m1() / (2.0 * lam);
            let m = sum[j] / n as f64;
            let v = sq[j] / n as f64 - m * m;
            assert!((m - mean).abs() < 4.0 * (var / n as f64).sqrt(), "mode {j}: {m} vs {mean}");
            assert!((v / var - 1.0).abs() < 0.1, "mode {j}: {v} vs {var}");
        }
    }

    #[test]
    fn deterministic_dissipative_flow() {
        let op = SpectralOperator::dirichlet(2).unwrap();
        let mut set = Preset::Baseline.build(2).unwrap();
        set.regular = RegularDrift::Dissipative { rate: 2.0 };
        set.noise = crate::coefficients::DiagonalNoise::constant(vec![0.0; 2]);
        let x0 = [1.0, 1.0];
        let p = simulate_mild(&op, &set, &x0, 0.5, 1.0 / 1024.0, &key(1), 0).unwrap();
        let x = p.states.last().unwrap();
        for j in 0..2 {
            let want = (-(op.eigenvalue(j) + 2.0) * 0.5).exp();
            assert!((x[j] / want - 1.0).abs() < 5e-2, "mode {j}: {} vs {want}", x[j]);
        }
    }

    #[test]
    fn coarsened_increments_are_sums() {
        let k = key(2);
        let mut fine = IncrementSource::new(&k, 3, 0.25, 0);
        let mut coarse = IncrementSource::new(&k, 3, 0.5, 1);
        let (mut a, mut b, mut c) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        fine.fill(2, &mut a);
        fine.fill(3, &mut b);
        coarse.fill(1, &mut c);
        for j in 0..4 {
            assert!((a[j] + b[j] - c[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn refinement_errors_shrink() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Multiplicative.build(4).unwrap();
        let errs = refinement_errors(&op, &set, &[0.5, 0.2, 0.0, 0.0], 0.25, 1.0 / 32.0, 3, 64, &key(3)).unwrap();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn same_start_gives_zero_gap() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Dini.build(4).unwrap();
        let x0 = [0.1, 0.0, 0.0, 0.0];
        let g = pathwise_uniqueness_experiment(&op, &set, &x0, &x0, 0.25, 1.0 / 64.0, 16, &key(4)).unwrap();
        assert_eq!(g.max, 0.0);
        let g = pathwise_uniqueness_experiment(&op, &set, &x0, &[0.2, 0.0, 0.0, 0.0], 0.25, 1.0 / 64.0, 16, &key(4))
            .unwrap();
        assert!(g.median > 0.0 && g.median <= g.q90 && g.q90 <= g.max);
    }

    #[test]
    fn residual_vanishes_without_singular_drift() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Multiplicative.build(4).unwrap();
        let sol = solve_u(&op, &set, &small(), 4.0, &key(5), false).unwrap();
        let u = sol.field();
        let p = simulate_mild(&op, &set, &[0.3, 0.1, 0.0, 0.0], 0.5, 1.0 / 64.0, &key(5), 0).unwrap();
        assert!(representation_residual(&op, &set, &u, 4.0, &p).unwrap() <= 1e-12);
    }

    #[test]
    fn residual_detects_wrong_lambda() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Dini.build(4).unwrap();
        let sol = solve_u(&op, &set, &small(), 8.0, &key(6), false).unwrap();
        let u = sol.field();
        let mut good = 0.0;
        let mut bad = 0.0;
        for i in 0..8 {
            let p = simulate_mild(&op, &set, &[0.1, 0.0, 0.0, 0.0], 0.5, 1.0 / 128.0, &key(6), i).unwrap();
            good += representation_residual(&op, &set, &u, 8.0, &p).unwrap();
            bad += representation_residual(&op, &set, &u, 16.0, &p).unwrap();
        }
        assert!(good < bad, "{good} vs {bad}");
        assert!(good / 8.0 < 0.1, "{good}");
    }

    #[test]
    fn transformed_path_tracks_original() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Dini.build(4).unwrap();
        let lam = 8.0;
        let sol = solve_u(&op, &set, &small(), lam, &key(7), false).unwrap();
        let u = sol.field();
        let tr = Transformed::new(&op, &set, &u, lam).unwrap();
        let x0 = [0.1, 0.0, 0.0, 0.0];
        let y0 = theta_apply(&u, 0.0, &x0);
        let dt = 1.0 / 256.0;
        let mut gap = 0.0;
        for i in 0..8 {
            let xbar = tr.simulate(&y0, 0.5, dt, &mut IncrementSource::new(&key(7), i, dt, 0)).unwrap();
            let x = simulate_mild(&op, &set, &x0, 0.5, dt, &key(7), i).unwrap();
            let back = tr.pull_back(0.5, xbar.states.last().unwrap()).unwrap();
            gap += distance(&back, x.states.last().unwrap());
        }
        assert!(gap / 8.0 < 0.05, "{gap}");
    }

    #[test]
    fn galerkin_levels() {
        let op = SpectralOperator::dirichlet(6).unwrap();
        let set = Preset::Dini.build(6).unwrap();
        let lam = 8.0;
        let u = solve_u(&op, &set, &small(), lam, &key(8), false).unwrap().field();
        let tr = Transformed::new(&op, &set, &u, lam).unwrap();
        let y0 = [0.1, 0.2, 0.3, 0.2, 0.1, 0.05];
        let rows = galerkin_study(&tr, &y0, 0.5, 1.0 / 64.0, &[2, 4, 6], 8, &key(8)).unwrap();
        assert_eq!(rows[2].full_error, 0.0);
        assert!(rows.iter().all(|r| r.projected_error == 0.0));
        assert!(rows[0].full_error > rows[1].full_error && rows[1].full_error > 0.0);
        assert!(galerkin_study(&tr, &y0, 0.5, 1.0 / 64.0, &[7], 2, &key(8)).is_err());
    }

    #[test]
    fn bihari_bound_holds_for_dissipative_preset() {
        let op = SpectralOperator::dirichlet(4).unwrap();
        let set = Preset::Dissipative.build(4).unwrap();
        let r = explosion_monitor(&op, &set, &[1.0, 0.5, 0.0, 0.0], 1.0, 1.0 / 128.0, 32, &key(9)).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
        assert_eq!(r.explosions, 0);
        let none = Preset::Baseline.build(4).unwrap();
        assert!(explosion_monitor(&op, &none, &[0.0; 4], 1.0, 0.1, 2, &key(9)).is_err());
    }

    #[test]
    fn explosive_preset_blows_up() {
        let op = SpectralOperator::dirichlet(2).unwrap();
        let set = Preset::Explosive.build(2).unwrap();
        let p = simulate_mild(&op, &set, &[5.0, 0.0], 2.0, 1.0 / 256.0, &key(10), 0).unwrap();
        assert!(p.exploded);
        assert!(p.exit_time.unwrap() < 2.0);
    }

    #[test]
    fn csv_export() {
        let op = SpectralOperator::dirichlet(2).unwrap();
        let set = Preset::Baseline.build(2).unwrap();
        let p = simulate_mild(&op, &set, &[0.0, 0.0], 0.1, 0.05, &key(11), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("path.csv");
        p.write_csv(&f).unwrap();
        let text = std::fs::read_to_string(&f).unwrap();
        assert!(text.starts_with("t,x0,x1\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
