//! Subcommand orchestration, artifact bookkeeping, run manifests and replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::acceptance::{run_all, CriterionOutcome};
use crate::coefficients::CoefficientSet;
use crate::config::{json_diff, RunConfig};
use crate::error::{LabError, Result};
use crate::girsanov::{direct_estimate, harnack_compose, strong_feller_probe, weighted_estimates};
use crate::mild::{
    galerkin_study, pathwise_uniqueness_experiment, representation_residual, simulate_mild, simulate_mild_with,
    IncrementSource, Transformed,
};
use crate::ou::OuEngine;
use crate::regularization::{select_lambda, solve_u, theta_apply, USolution};
use crate::rng::{Module, StreamKey};
use crate::spectral::SpectralOperator;
use crate::stats::{column_estimates, sample_paths, Estimate};
use crate::testfn::{ScalarField, TestFunction};
use crate::verify::{
    jensen_margins, run_suite, semigroup_relation_check, GaussianOracle, Harness, InequalityKind, PairTest, Sampler,
    SuiteConstants,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Name of the parameter snapshot, always the first artifact of a run.
pub const PARAMS_FILE: &str = "params.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveU,
    Bismut,
    Representation,
    Uniqueness,
    Galerkin,
    Girsanov,
    StrongFeller,
    Harnack,
    VerifyAll,
}

impl Command {
    fn experiment(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Command,
    /// Whether `verify-all` also ran the fixed acceptance criteria.
    pub full: bool,
    pub config: RunConfig,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputRecord>,
    pub passed: bool,
    pub summary: String,
}

/// Files written by one run, in order.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Result of one subcommand: pass flag and a one-line summary.
struct Verdict {
    passed: bool,
    summary: String,
}

/// Executes `command`, writing artifacts and the manifest into `cfg.out`.
pub fn run(command: Command, cfg: &RunConfig, full: bool) -> Result<RunManifest> {
    cfg.validate()?;
    precheck(command, cfg)?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.out)?;
    let mut art = Artifacts { dir: cfg.out.clone(), files: Vec::new() };
    art.json(PARAMS_FILE, &cfg.parameters()?)?;
    let ctx = Context::new(cfg, command)?;
    let verdict = match command {
        Command::Simulate => ctx.simulate(&mut art)?,
        Command::SolveU => ctx.solve_u(&mut art)?,
        Command::Bismut => ctx.bismut(&mut art)?,
        Command::Representation => ctx.representation(&mut art)?,
        Command::Uniqueness => ctx.uniqueness(&mut art)?,
        Command::Galerkin => ctx.galerkin(&mut art)?,
        Command::Girsanov => ctx.girsanov(&mut art)?,
        Command::StrongFeller => ctx.strong_feller(&mut art)?,
        Command::Harnack => ctx.harnack(&mut art)?,
        Command::VerifyAll => ctx.verify_all(&mut art, full)?,
    };
    let outputs = art
        .files
        .iter()
        .map(|f| Ok(OutputRecord { file: f.clone(), sha256: sha256_hex(&art.dir.join(f))? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        command,
        full,
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
        passed: verdict.passed,
        summary: verdict.summary,
    };
    let tmp = art.dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::rename(&tmp, art.dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Command-specific configuration checks, run before anything is written.
fn precheck(command: Command, cfg: &RunConfig) -> Result<()> {
    let f = &cfg.experiment.test_function;
    match command {
        Command::Harnack if !matches!(f, TestFunction::Exponential { .. } | TestFunction::ClippedExponential { .. }) => Err(
            LabError::Config(format!("experiment.test_function: Harnack needs a positive function, got {f:?}")),
        ),
        Command::Harnack if !cfg.coefficient_set()?.noise.is_constant() => {
            Err(LabError::Config("coefficients.noise: Harnack composition needs constant noise".into()))
        }
        Command::Harnack if cfg.experiment.paths < 32 => Err(LabError::Config("experiment.paths: Harnack needs at least 32".into())),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub identical: bool,
    pub first_divergence: Option<String>,
    pub parameter_diff: Vec<String>,
}

/// Re-executes the run described by `manifest_path` and compares every output byte for byte.
pub fn replay(manifest_path: &Path) -> Result<ReplayReport> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: RunManifest =
        serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
            .map_err(|e| LabError::Config(format!("{}: {}", e.path(), e.inner())))?;
    if manifest.version != VERSION {
        return Err(LabError::Config(format!(
            "manifest was written by version {}, this is {VERSION}; refusing to replay",
            manifest.version
        )));
    }
    let run_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let scratch = run_dir.join(".replay");
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    let mut cfg = manifest.config.clone();
    cfg.out = scratch.clone();
    let fresh = run(manifest.command, &cfg, manifest.full);
    let report = fresh.and_then(|fresh| {
        let mut report = ReplayReport { identical: true, first_divergence: None, parameter_diff: Vec::new() };
        for (i, old) in manifest.outputs.iter().enumerate() {
            let new = fresh.outputs.get(i);
            if new.is_some_and(|n| n == old) {
                continue;
            }
            report.identical = false;
            report.first_divergence = Some(old.file.clone());
            if old.file == PARAMS_FILE {
                let recorded: Value = fs::read_to_string(run_dir.join(PARAMS_FILE))
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok())
                    .unwrap_or(Value::Null);
                let regenerated: Value = serde_json::from_str(&fs::read_to_string(scratch.join(PARAMS_FILE))?)?;
                report.parameter_diff = json_diff(&recorded, &regenerated);
            }
            break;
        }
        if report.identical && fresh.outputs.len() != manifest.outputs.len() {
            report.identical = false;
            report.first_divergence = Some("output file list".into());
        }
        Ok(report)
    });
    let _ = fs::remove_dir_all(&scratch);
    report
}

struct Context<'a> {
    cfg: &'a RunConfig,
    op: SpectralOperator,
    set: CoefficientSet,
    key: StreamKey,
}

fn fmt_estimate(e: &Estimate) -> String {
    format!("{:.6} ± {:.2e}", e.estimate, e.std_error)
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig, command: Command) -> Result<Self> {
        Ok(Self {
            cfg,
            op: cfg.operator()?,
            set: cfg.coefficient_set()?,
            key: StreamKey::new(cfg.seed, Module::Runner, command.experiment()),
        })
    }

    fn exp(&self) -> &crate::config::ExperimentParams {
        &self.cfg.experiment
    }

    fn regularize(&self) -> Result<(f64, USolution, Value)> {
        let solver = self.cfg.solver();
        let key = self.key.child(1);
        match self.exp().lambda {
            Some(lambda) => {
                let sol = solve_u(&self.op, &self.set, &solver, lambda, &key, true)?;
                Ok((lambda, sol, Value::Null))
            }
            None => {
                let sel = select_lambda(&self.op, &self.set, &solver, &key)?;
                let attempts = serde_json::to_value(&sel.attempts)?;
                Ok((sel.lambda, sel.solution, attempts))
            }
        }
    }

    fn simulate(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let x0 = self.cfg.start();
        for i in 0..e.export_paths.min(e.paths) {
            let p = simulate_mild(&self.op, &self.set, &x0, e.horizon, e.dt, &self.key, i as u64)?;
            p.write_csv(&art.path(&format!("path_{i:04}.csv")))?;
        }
        let d = self.op.dim();
        let failure = std::sync::Mutex::new(None);
        let table = sample_paths(e.paths, d + 1, |i, row| match simulate_mild(&self.op, &self.set, &x0, e.horizon, e.dt, &self.key, i) {
            Ok(p) => {
                row[..d].copy_from_slice(p.states.last().expect("non-empty path"));
                row[d] = if p.exploded { 1.0 } else { 0.0 };
            }
            Err(err) => {
                failure.lock().unwrap().get_or_insert(err);
            }
        });
        if let Some(err) = failure.into_inner().unwrap() {
            return Err(err);
        }
        let est = column_estimates(&table, d + 1, self.cfg.seed);
        let explosions = (est[d].estimate * e.paths as f64).round() as usize;
        art.json("terminal.json", &json!({"seed": self.cfg.seed, "terminal_mean": &est[..d], "explosions": explosions}))?;
        Ok(Verdict { passed: true, summary: format!("{} paths, {explosions} explosions", e.paths) })
    }

    fn solve_u(&self, art: &mut Artifacts) -> Result<Verdict> {
        let (lambda, sol, attempts) = self.regularize()?;
        sol.grid.save(&self.cfg.out, "u")?;
        art.files.push("u.json".into());
        art.files.push("u.csv".into());
        art.json(
            "solution.json",
            &json!({
                "seed": self.cfg.seed,
                "lambda": lambda,
                "iterations": sol.iterations,
                "changes": sol.changes,
                "contraction_ratios": sol.contraction_ratios,
                "grad_bound": sol.grad_bound,
                "hessian_scale": sol.hessian_scale,
                "theta_bounds": sol.theta_bounds,
                "fixed_point_residual": sol.fixed_point_residual,
                "lambda_attempts": attempts,
            }),
        )?;
        Ok(Verdict {
            passed: true,
            summary: format!("λ = {lambda}, {} iterations, sup|u| = {:.3e}", sol.iterations, sol.grid.sup_norm()),
        })
    }

    fn bismut(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let (x, eta) = (self.cfg.start(), self.cfg.direction());
        let f = &e.test_function;
        let eng = OuEngine::new(&self.op, &self.set, e.dt)?;
        let bismut = eng.bismut_gradient(0.0, e.horizon, f, &x, &eta, e.paths, &self.key.child(1))?;
        let h = 1e-3;
        let fd_key = self.key.child(2);
        let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(&eta).map(|(a, v)| a + sign * h * v).collect() };
        let hi = eng.terminal_table(0.0, e.horizon, &shifted(1.0), e.paths, &fd_key, 1, |z, r| r[0] = f.eval(z))?;
        let lo = eng.terminal_table(0.0, e.horizon, &shifted(-1.0), e.paths, &fd_key, 1, |z, r| r[0] = f.eval(z))?;
        let diff: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let fd = Estimate::from_samples(&diff, self.cfg.seed);
        let gap = (bismut.estimate - fd.estimate).abs() / bismut.combined_se(&fd);
        let agree = gap <= 3.0;
        art.json("bismut.json", &json!({"seed": self.cfg.seed, "bismut": bismut, "finite_difference": fd, "sigmas": gap, "agree": agree}))?;
        Ok(Verdict {
            passed: agree,
            summary: format!("Bismut {} vs FD {} ({gap:.2}σ)", fmt_estimate(&bismut), fmt_estimate(&fd)),
        })
    }

    fn representation(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let (lambda, sol, _) = self.regularize()?;
        let u = sol.field();
        let x0 = self.cfg.start();
        let levels = e.refinements + 1;
        let mut rows = Vec::new();
        for l in 0..levels {
            let dt = e.dt / f64::from(1u32 << l);
            let mut total = 0.0;
            for i in 0..e.paths as u64 {
                let p = simulate_mild_with(&self.op, &self.set, &x0, e.horizon, dt, &mut IncrementSource::new(&self.key, i, dt, levels - 1 - l))?;
                total += representation_residual(&self.op, &self.set, &u, lambda, &p)?;
            }
            rows.push((dt, total / e.paths as f64));
        }
        let decreasing = rows.windows(2).all(|w| w[1].1 < w[0].1);
        art.json("representation.json", &json!({"seed": self.cfg.seed, "lambda": lambda, "residuals": rows, "decreasing": decreasing}))?;
        Ok(Verdict {
            passed: decreasing || !self.set.has_singular_drift(),
            summary: format!("mean residuals {:?}", rows.iter().map(|r| format!("{:.2e}", r.1)).collect::<Vec<_>>()),
        })
    }

    fn uniqueness(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let x0 = self.cfg.start();
        let dir = self.cfg.direction();
        let mut rows = Vec::new();
        for sep in &e.separations {
            let y0: Vec<f64> = x0.iter().zip(&dir).map(|(a, v)| a + sep * v).collect();
            rows.push(pathwise_uniqueness_experiment(&self.op, &self.set, &x0, &y0, e.horizon, e.dt, e.paths, &self.key)?);
        }
        let identical = simulate_mild(&self.op, &self.set, &x0, e.horizon, e.dt, &self.key, 0)?
            == simulate_mild(&self.op, &self.set, &x0, e.horizon, e.dt, &self.key, 0)?;
        art.json("uniqueness.json", &json!({"seed": self.cfg.seed, "bitwise_replay": identical, "gaps": rows}))?;
        Ok(Verdict {
            passed: identical,
            summary: format!("median sup-gaps {:?}", rows.iter().map(|r| format!("{:.2e}", r.median)).collect::<Vec<_>>()),
        })
    }

    fn galerkin(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let (lambda, sol, _) = self.regularize()?;
        let u = sol.field();
        let tr = Transformed::new(&self.op, &self.set, &u, lambda)?;
        let y0 = theta_apply(&u, 0.0, &self.cfg.start());
        let rows = galerkin_study(&tr, &y0, e.horizon, e.dt, &self.cfg.levels(), e.paths, &self.key)?;
        let mut w = csv::Writer::from_path(art.path("galerkin.csv"))?;
        w.write_record(["level", "full_error", "full_se", "projected_error", "projected_se", "seed"])?;
        for r in &rows {
            w.write_record([
                r.level.to_string(),
                format!("{:e}", r.full_error),
                format!("{:e}", r.full_se),
                format!("{:e}", r.projected_error),
                format!("{:e}", r.projected_se),
                self.cfg.seed.to_string(),
            ])?;
        }
        w.flush()?;
        let nonincreasing = rows.windows(2).all(|w| w[1].full_error <= w[0].full_error + 2.0 * w[0].full_se.hypot(w[1].full_se));
        art.json("galerkin.json", &json!({"seed": self.cfg.seed, "lambda": lambda, "rows": rows, "nonincreasing": nonincreasing}))?;
        Ok(Verdict {
            passed: nonincreasing,
            summary: format!("full errors {:?}", rows.iter().map(|r| format!("{:.2e}", r.full_error)).collect::<Vec<_>>()),
        })
    }

    fn girsanov(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let x = self.cfg.start();
        let f = &e.test_function;
        let w = weighted_estimates(&self.op, &self.set, &[f], &x, e.horizon, e.dt, e.paths, &self.key.child(1))?;
        let direct = direct_estimate(&self.op, &self.set, f, &x, e.horizon, e.dt, e.paths, &self.key.child(2))?;
        let gap = (w[0].estimate - direct.estimate).abs() / w[0].combined_se(&direct);
        let mass_ok = w[1].within(1.0, 4.0) || (w[1].std_error == 0.0 && w[1].estimate == 1.0);
        let passed = gap <= 3.0 && mass_ok;
        art.json("girsanov.json", &json!({"seed": self.cfg.seed, "weighted": w[0], "direct": direct, "mass": w[1], "sigmas": gap, "passed": passed}))?;
        Ok(Verdict {
            passed,
            summary: format!("weighted {} vs direct {} ({gap:.2}σ), E R = {}", fmt_estimate(&w[0]), fmt_estimate(&direct), fmt_estimate(&w[1])),
        })
    }

    fn strong_feller(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let (x, dir) = (self.cfg.start(), self.cfg.direction());
        let level: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let f = TestFunction::HalfSpace { weights: dir.clone(), level };
        let rows = strong_feller_probe(&self.op, &self.set, &f, &x, &dir, &e.radii, e.horizon, e.dt, e.paths, &self.key)?;
        let mut w = csv::Writer::from_path(art.path("strong_feller.csv"))?;
        w.write_record(["radius", "gap", "noise_floor", "seed"])?;
        for r in &rows {
            w.write_record([format!("{:e}", r.radius), format!("{:e}", r.gap), format!("{:e}", r.noise_floor), r.seed.to_string()])?;
        }
        w.flush()?;
        let resolved = rows.windows(2).all(|w| w[1].gap < w[0].gap || w[1].gap <= 3.0 * w[1].noise_floor);
        Ok(Verdict { passed: resolved, summary: format!("gaps {:?}", rows.iter().map(|r| format!("{:.2e}", r.gap)).collect::<Vec<_>>()) })
    }

    fn harnack(&self, art: &mut Artifacts) -> Result<Verdict> {
        let e = self.exp();
        let r = harnack_compose(
            &self.op,
            &self.set,
            &e.test_function,
            &self.cfg.start(),
            &self.cfg.partner(),
            e.horizon,
            e.harnack_p,
            e.dt,
            e.paths,
            &self.key,
        )?;
        art.json("harnack.json", &r)?;
        Ok(Verdict {
            passed: r.holds(3.0),
            summary: format!("lhs {:.4e} rhs {:.4e} margin {:.2e} ± {:.1e}", r.lhs, r.rhs, r.margin, r.margin_se),
        })
    }

    fn verify_all(&self, art: &mut Artifacts, full: bool) -> Result<Verdict> {
        let e = self.exp();
        let x = self.cfg.start();
        let times = self.cfg.times();
        let f: &dyn ScalarField = &e.test_function;
        let points = vec![x.clone()];
        let dir = self.cfg.direction();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = [0.1, 0.2, 0.4]
            .iter()
            .map(|r| (x.clone(), x.iter().zip(&dir).map(|(a, v)| a + r * v).collect()))
            .collect();
        let g = PairTest::Aligned { kappa: 2.0, clip: Some(3.0) };
        let gaussian = !self.set.has_singular_drift() && self.set.regular.is_zero() && self.set.noise.is_constant();
        let mut notes = Vec::new();
        let mut passed = true;

        let regularized = if self.set.has_singular_drift() { Some(self.regularize()?) } else { None };
        let field = regularized.as_ref().map(|(_, sol, _)| sol.field());
        let tr = match (&regularized, &field) {
            (Some((lambda, _, _)), Some(u)) => Some(Transformed::new(&self.op, &self.set, u, *lambda)?),
            _ => None,
        };
        if let Some(tr) = &tr {
            let sm = semigroup_relation_check(tr, f, &x, e.horizon, e.dt, e.paths, &self.key.child(3))?;
            passed &= sm.agree;
            notes.push(format!("semigroup relation agree={}", sm.agree));
            art.json("semigroup_relation.json", &sm)?;
        }
        let harness = |paths: usize, key: StreamKey| -> Result<Harness> {
            let h = Harness::new(&self.op, &self.set, e.dt, times.clone(), paths, key)?;
            match &tr {
                Some(tr) => h.with_sampler(Sampler::Transformed(tr)),
                None => Ok(h),
            }
        };
        let mut h = harness(e.paths, self.key.child(4))?;
        let base = run_suite(&mut h, f, &points, &pairs, &g, &SuiteConstants::default())?;
        let mut h2 = harness(2 * e.paths, self.key.child(4))?;
        let doubled = run_suite(&mut h2, f, &points, &pairs, &g, &SuiteConstants::from_suite(&base))?;
        passed &= base.all_pass() && doubled.all_pass();
        let worst = base
            .reports
            .iter()
            .filter_map(|r| doubled.get(r.inequality).map(|o| o.relative_change(r)))
            .fold(0.0, f64::max);
        passed &= worst <= 0.2;
        notes.push(format!("largest constant change under doubled paths {:.1}%", 100.0 * worst));
        let jensen = jensen_margins(&h, &TestFunction::ClippedExponential { weights: dir.clone(), clip: 3.0 }, &points)?;
        passed &= jensen.iter().all(|j| j.holds());

        let mut oracle_rows = Vec::new();
        if gaussian {
            let oracle = GaussianOracle { op: &self.op, noise: self.set.noise.base.clone() };
            if let TestFunction::Coordinate { mode } = e.test_function {
                let a: Vec<f64> = (0..self.op.dim()).map(|j| if j == mode { 1.0 } else { 0.0 }).collect();
                for kind in [InequalityKind::GradBakry, InequalityKind::VarianceUpper, InequalityKind::VarianceLower, InequalityKind::G0] {
                    let got = doubled.get(kind).map_or(f64::NAN, |r| r.fitted_constant);
                    let want = oracle.fitted_linear(kind, &a, &times);
                    let ok = (got / want - 1.0).abs() <= 0.25;
                    passed &= ok;
                    oracle_rows.push(json!({"inequality": kind, "fitted": got, "oracle": want, "ok": ok}));
                }
            }
            notes.push(format!("{} Gaussian oracle comparisons", oracle_rows.len()));
        }
        for r in &doubled.reports {
            r.write_rows_csv(&art.path(&format!("{}_rows.csv", r.inequality.name())))?;
            r.write_fit_csv(&art.path(&format!("{}_fit.csv", r.inequality.name())))?;
        }
        art.json("suite.json", &json!({"base": base, "doubled": doubled, "jensen": jensen, "oracle": oracle_rows}))?;
        let mut w = csv::Writer::from_path(art.path("summary.csv"))?;
        w.write_record(["inequality", "fitted_constant", "fitted_se", "pass", "seed"])?;
        for r in &doubled.reports {
            w.write_record([r.inequality.name().to_string(), format!("{:e}", r.fitted_constant), format!("{:e}", r.fitted_se), r.pass.to_string(), r.seed.to_string()])?;
        }
        w.flush()?;

        if full {
            let outcomes: Vec<CriterionOutcome> = run_all(self.cfg.seed);
            let ok = outcomes.iter().all(|o| o.passed);
            passed &= ok;
            notes.push(format!("acceptance {}/{} passed", outcomes.iter().filter(|o| o.passed).count(), outcomes.len()));
            let stable: Vec<Value> = outcomes
                .iter()
                .map(|o| json!({"id": o.id, "name": o.name, "passed": o.passed, "detail": o.detail}))
                .collect();
            art.json("acceptance.json", &stable)?;
        }
        Ok(Verdict { passed, summary: notes.join("; ") })
    }
}
