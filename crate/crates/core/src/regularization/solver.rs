//! Picard iteration of `(Γu)_s = ∫_s^T e^{-λ(t-s)} P⁰_{s,t}(∇_{b_t} u_t + b_t) dt` on a lattice.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{LatticeSpec, UField, UGrid};
use crate::coefficients::CoefficientSet;
use crate::error::{ensure_dim, LabError, Result};
use crate::rng::StreamKey;
use crate::spectral::SpectralOperator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct USolverConfig {
    pub horizon: f64,
    pub time_nodes: usize,
    pub lattice_modes: usize,
    pub points: usize,
    /// Box half-width; defaults to 4 stationary standard deviations of the slowest mode.
    pub half_width: Option<f64>,
    pub paths: usize,
    /// Midpoint cells on `[s, T]`.
    pub cells: usize,
    /// Subdivision of the cells in the first sixteenth of `[s, T]`.
    pub refine: usize,
    /// Largest Euler step for state-dependent noise.
    pub dt: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for USolverConfig {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            time_nodes: 9,
            lattice_modes: 2,
            points: 33,
            half_width: None,
            paths: 128,
            cells: 64,
            refine: 4,
            dt: 1.0 / 256.0,
            tol: 1e-4,
            max_iters: 40,
        }
    }
}

impl USolverConfig {
    pub fn lattice(&self, op: &SpectralOperator, set: &CoefficientSet) -> LatticeSpec {
        let half_width = self
            .half_width
            .unwrap_or_else(|| 4.0 * set.noise.base[0].abs() / (2.0 * op.eigenvalue(0)).sqrt());
        LatticeSpec { modes: self.lattice_modes, half_width, points: self.points }
    }

    /// Midpoints and weights on `[0, τ]`, refined near zero.
    fn quadrature(&self, tau: f64) -> Vec<(f64, f64)> {
        let h = tau / self.cells as f64;
        let near = (self.cells / 16).max(1);
        let mut nodes = Vec::new();
        for c in 0..self.cells {
            let a = c as f64 * h;
            let parts = if c < near { self.refine.max(1) } else { 1 };
            let w = h / parts as f64;
            for j in 0..parts {
                nodes.push((a + (j as f64 + 0.5) * w, w));
            }
        }
        nodes
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct USolution {
    pub grid: UGrid,
    pub iterations: usize,
    /// `‖u^{k+1} − u^k‖` per iteration.
    pub changes: Vec<f64>,
    /// `‖u^{k+1} − u^k‖ / ‖u^k − u^{k−1}‖` per iteration after the first.
    pub contraction_ratios: Vec<f64>,
    pub grad_bound: f64,
    pub hessian_scale: f64,
    /// `(sup ‖∇θ‖, sup ‖∇θ^{-1}‖)`.
    pub theta_bounds: (f64, f64),
    /// `‖Γu − u‖` after convergence, when requested.
    pub fixed_point_residual: Option<f64>,
}

impl USolution {
    /// Largest measured contraction ratio, or 0 when the iteration stopped after one step.
    pub fn measured_ratio(&self) -> f64 {
        self.contraction_ratios.iter().copied().fold(0.0, f64::max)
    }

    pub fn field(&self) -> UField {
        UField::new(&self.grid)
    }
}

/// One step of the reference process between quadrature nodes.
#[derive(Debug, Clone, Copy)]
struct Step {
    h: f64,
    /// Index of the quadrature node reached at the end of the step, if any.
    node: Option<usize>,
}

/// Random-number table and step schedule for one time node `s`.
struct NodePlan {
    s: f64,
    nodes: Vec<(f64, f64)>,
    steps: Vec<Step>,
    /// `paths × steps × active` standard normals.
    normals: Vec<f64>,
}

/// The map `Γ` with fixed random numbers, so repeated applications are deterministic.
pub struct GammaOperator<'a> {
    op: &'a SpectralOperator,
    set: &'a CoefficientSet,
    lambda: f64,
    cfg: USolverConfig,
    lattice: LatticeSpec,
    active: usize,
    value_modes: usize,
    plans: Vec<NodePlan>,
}

impl<'a> GammaOperator<'a> {
    pub fn new(op: &'a SpectralOperator, set: &'a CoefficientSet, cfg: &USolverConfig, lambda: f64, key: &StreamKey) -> Result<Self> {
        ensure_dim(op.dim(), set.dim())?;
        if !(lambda >= 0.0) {
            return Err(LabError::Domain(format!("λ must be nonnegative, got {lambda}")));
        }
        if !set.singular.sup_bound().is_finite() {
            return Err(LabError::Domain("Γ needs a bounded singular drift".into()));
        }
        if cfg.paths == 0 || cfg.cells == 0 || cfg.time_nodes < 2 {
            return Err(LabError::Config("u solver needs paths, cells and at least two time nodes".into()));
        }
        let lattice = cfg.lattice(op, set);
        lattice.validate()?;
        if lattice.modes > op.dim() {
            return Err(LabError::Config("lattice modes exceed the state dimension".into()));
        }
        let value_modes = set.singular.value_support().max(1);
        let active = set.coupled_modes().max(lattice.modes).max(value_modes).min(op.dim());
        let grid_dt = cfg.horizon / (cfg.time_nodes - 1) as f64;
        let plans = (0..cfg.time_nodes - 1)
            .map(|i| {
                let s = i as f64 * grid_dt;
                let tau = cfg.horizon - s;
                let nodes: Vec<(f64, f64)> = cfg.quadrature(tau).into_iter().map(|(t, w)| (s + t, w)).collect();
                let mut steps = Vec::new();
                let mut now = s;
                for (j, &(t, _)) in nodes.iter().enumerate() {
                    let sub = if set.noise.is_constant() { 1 } else { ((t - now) / cfg.dt).ceil().max(1.0) as usize };
                    let h = (t - now) / sub as f64;
                    for k in 0..sub {
                        steps.push(Step { h, node: (k + 1 == sub).then_some(j) });
                    }
                    now = t;
                }
                let node_key = key.child(i as u64);
                let mut normals = vec![0.0; cfg.paths * steps.len() * active];
                normals.chunks_mut(steps.len() * active).enumerate().for_each(|(p, chunk)| {
                    let mut stream = node_key.path(p as u64);
                    for (k, row) in chunk.chunks_mut(active).enumerate() {
                        stream.normals(k as u64, row);
                    }
                });
                NodePlan { s, nodes, steps, normals }
            })
            .collect();
        Ok(Self { op, set, lambda, cfg: cfg.clone(), lattice, active, value_modes, plans })
    }

    pub fn empty_grid(&self) -> Result<UGrid> {
        UGrid::zeros(self.cfg.horizon, self.lambda, self.cfg.time_nodes, self.lattice, self.op.dim(), self.value_modes)
    }

    /// `Γu`; `None` stands for `u = 0`.
    pub fn apply(&self, u: Option<&UField>) -> Result<UGrid> {
        let mut out = self.empty_grid()?;
        let (r, m, d, act) = (self.value_modes, self.lattice.modes, self.op.dim(), self.active);
        let constant_noise = self.set.noise.is_constant();
        let lam_n = &self.op.eigenvalues()[..act];
        let q0 = &self.set.noise.base[..act];
        for (i, plan) in self.plans.iter().enumerate() {
            // Per-step transition factors shared by all lattice points.
            let factors: Vec<(Vec<f64>, Vec<f64>)> = plan
                .steps
                .iter()
                .map(|st| {
                    let decay: Vec<f64> = lam_n.iter().map(|l| (-l * st.h).exp()).collect();
                    let sd: Vec<f64> = if constant_noise {
                        lam_n.iter().zip(q0).map(|(l, q)| q * (-(-2.0 * l * st.h).exp_m1() / (2.0 * l)).sqrt()).collect()
                    } else {
                        vec![st.h.sqrt(); act]
                    };
                    (decay, sd)
                })
                .collect();
            let weights: Vec<f64> = plan.nodes.iter().map(|(t, w)| w * (-self.lambda * (t - plan.s)).exp()).collect();
            let nsteps = plan.steps.len();
            let results: Vec<Vec<f64>> = (0..self.lattice.len())
                .into_par_iter()
                .map(|p| {
                    let start = self.lattice.coordinates(p);
                    let mut acc = vec![0.0; r];
                    let mut z = vec![0.0; d];
                    let mut q = vec![0.0; d];
                    let mut b = vec![0.0; d];
                    let mut ubuf = vec![0.0; u.map_or(0, |f| f.stride())];
                    for path in 0..self.cfg.paths {
                        z.iter_mut().for_each(|v| *v = 0.0);
                        z[..m].copy_from_slice(&start);
                        let table = &plan.normals[path * nsteps * act..(path + 1) * nsteps * act];
                        for (k, st) in plan.steps.iter().enumerate() {
                            let xi = &table[k * act..(k + 1) * act];
                            let (decay, sd) = &factors[k];
                            if constant_noise {
                                for n in 0..act {
                                    z[n] = decay[n] * z[n] + sd[n] * xi[n];
                                }
                            } else {
                                self.set.noise_diag(0.0, &z, &mut q);
                                for n in 0..act {
                                    z[n] = decay[n] * (z[n] + q[n] * sd[n] * xi[n]);
                                }
                            }
                            if let Some(j) = st.node {
                                let t = plan.nodes[j].0;
                                b.iter_mut().for_each(|v| *v = 0.0);
                                self.set.add_singular(t, &z, 1.0, &mut b);
                                let w = weights[j];
                                for n in 0..r {
                                    acc[n] += w * b[n];
                                }
                                if let Some(field) = u {
                                    field.eval_into(t, &z, &mut ubuf);
                                    for n in 0..r {
                                        let grad = &ubuf[r + n * m..r + (n + 1) * m];
                                        acc[n] += w * grad.iter().zip(&b[..m]).map(|(g, bk)| g * bk).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                    acc.iter_mut().for_each(|v| *v /= self.cfg.paths as f64);
                    acc
                })
                .collect();
            for (p, v) in results.into_iter().enumerate() {
                out.node_value_mut(i, p).copy_from_slice(&v);
            }
        }
        Ok(out)
    }
}

/// Picard iteration from `u = 0` until the sup-norm change drops below `cfg.tol`.
pub fn solve_u(
    op: &SpectralOperator,
    set: &CoefficientSet,
    cfg: &USolverConfig,
    lambda: f64,
    key: &StreamKey,
    check_residual: bool,
) -> Result<USolution> {
    if !(lambda > 0.0) {
        return Err(LabError::Domain(format!("λ must be positive, got {lambda}")));
    }
    let gamma = GammaOperator::new(op, set, cfg, lambda, key)?;
    let mut u = gamma.empty_grid()?;
    let mut changes = Vec::new();
    let mut ratios = Vec::new();
    let mut streak = 0;
    loop {
        let field = (u.sup_norm() > 0.0).then(|| UField::new(&u));
        let next = gamma.apply(field.as_ref())?;
        let change = next.sup_distance(&u);
        if let Some(prev) = changes.last() {
            let ratio = if *prev > 0.0 { change / prev } else { 0.0 };
            ratios.push(ratio);
            streak = if ratio >= 1.0 { streak + 1 } else { 0 };
        }
        changes.push(change);
        u = next;
        if change < cfg.tol {
            break;
        }
        if streak >= 3 {
            return Err(LabError::NoConvergence(format!(
                "Γ is not contracting at λ = {lambda} (ratios {ratios:?}); increase λ"
            )));
        }
        if changes.len() >= cfg.max_iters {
            return Err(LabError::NoConvergence(format!(
                "Picard iteration stalled at change {change} after {} iterations at λ = {lambda}",
                changes.len()
            )));
        }
    }
    let fixed_point_residual = if check_residual {
        Some(gamma.apply(Some(&UField::new(&u)))?.sup_distance(&u))
    } else {
        None
    };
    Ok(USolution {
        iterations: changes.len(),
        grad_bound: u.gradient_bound(),
        hessian_scale: u.second_difference_bound(),
        theta_bounds: u.theta_derivative_bounds(),
        changes,
        contraction_ratios: ratios,
        fixed_point_residual,
        grid: u,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaAttempt {
    pub lambda: f64,
    pub ratio: Option<f64>,
    pub grad_bound: Option<f64>,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub attempts: Vec<LambdaAttempt>,
    pub solution: USolution,
}

/// Largest λ tried by [`select_lambda`].
pub const LAMBDA_CAP: f64 = (1u64 << 20) as f64;

/// Doubles λ from 4 until the measured contraction ratio is at most 1/2 and
/// `‖∇u‖ ≤ 1/8`.
pub fn select_lambda(op: &SpectralOperator, set: &CoefficientSet, cfg: &USolverConfig, key: &StreamKey) -> Result<LambdaSelection> {
    let mut lambda = 4.0;
    let mut attempts = Vec::new();
    while lambda <= LAMBDA_CAP {
        match solve_u(op, set, cfg, lambda, key, false) {
            Ok(sol) => {
                let passed = sol.measured_ratio() <= 0.5 && sol.grad_bound <= 0.125;
                attempts.push(LambdaAttempt {
                    lambda,
                    ratio: Some(sol.measured_ratio()),
                    grad_bound: Some(sol.grad_bound),
                    passed,
                    error: None,
                });
                if passed {
                    return Ok(LambdaSelection { lambda, attempts, solution: sol });
                }
            }
            Err(LabError::NoConvergence(msg)) => attempts.push(LambdaAttempt {
                lambda,
                ratio: None,
                grad_bound: None,
                passed: false,
                error: Some(msg),
            }),
            Err(e) => return Err(e),
        }
        lambda *= 2.0;
    }
    Err(LabError::Certificate(format!(
        "no λ ≤ {LAMBDA_CAP} passed the contraction and gradient certificates: {}",
        serde_json::to_string(&attempts).unwrap_or_default()
    )))
}
