//! Run configuration: JSON file, environment overrides and semantic validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coefficients::{CoefficientSet, Preset};
use crate::error::{LabError, Result};
use crate::ou::step_count;
use crate::regularization::USolverConfig;
use crate::spectral::{EigenLaw, SpectralOperator};
use crate::testfn::TestFunction;

/// Prefix of environment variables overriding config keys; nested keys are joined by `__`,
/// e.g. `SPDE_LAB__EXPERIMENT__PATHS=2000`.
pub const ENV_PREFIX: &str = "SPDE_LAB__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSpec {
    pub dim: usize,
    pub eigenvalues: EigenLaw,
    pub trace_exponent: f64,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self { dim: 8, eigenvalues: EigenLaw::DirichletLaplacian, trace_exponent: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientSpec {
    pub preset: Preset,
    /// Explicit coefficients; replaces the preset when present.
    pub custom: Option<CoefficientSet>,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        Self { preset: Preset::Baseline, custom: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    /// Resolvent parameter; `null` selects it automatically.
    pub lambda: Option<f64>,
    /// Solver for `u`; its horizon is replaced by the experiment horizon.
    pub solver: USolverConfig,
    /// Start point, padded with zeros to the dimension.
    pub start: Vec<f64>,
    /// Second start point for two-point experiments.
    pub partner: Vec<f64>,
    /// Direction of derivatives and shifts.
    pub direction: Vec<f64>,
    pub test_function: TestFunction,
    pub radii: Vec<f64>,
    pub separations: Vec<f64>,
    /// Galerkin levels; empty means powers of two up to the dimension.
    pub levels: Vec<usize>,
    pub refinements: u32,
    pub harnack_p: f64,
    /// Time grid of the inequality checks; empty means `1/64, 1/32, …` up to the horizon.
    pub times: Vec<f64>,
    /// Paths written to CSV by `simulate`.
    pub export_paths: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            dt: 1.0 / 256.0,
            paths: 1000,
            lambda: None,
            solver: USolverConfig::default(),
            start: vec![0.05],
            partner: vec![0.25],
            direction: vec![1.0],
            test_function: TestFunction::Tanh { weights: vec![1.0, 0.5], scale: 3.0 },
            radii: vec![0.5, 0.25, 0.125, 0.0625],
            separations: vec![1e-2, 1e-3, 1e-4, 1e-5],
            levels: Vec::new(),
            refinements: 4,
            harnack_p: 2.0,
            times: Vec::new(),
            export_paths: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub operator: OperatorSpec,
    pub coefficients: CoefficientSpec,
    pub experiment: ExperimentParams,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            operator: OperatorSpec::default(),
            coefficients: CoefficientSpec::default(),
            experiment: ExperimentParams::default(),
            seed: 1,
            out: PathBuf::from("runs/latest"),
        }
    }
}

fn padded(v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|j| v.get(j).copied().unwrap_or(0.0)).collect()
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Reads `path`, applies environment overrides from `env` and validates.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e))?;
                serde_json::from_str(&text).map_err(|e| config_err(&p.display().to_string(), e))?
            }
            None => Value::Object(Default::default()),
        };
        apply_env_overrides(&mut value, env)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| config_err(&e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let d = self.operator.dim;
        if d == 0 {
            return Err(config_err("operator.dim", "must be at least 1"));
        }
        self.operator()?;
        self.coefficient_set()?;
        if !(e.horizon > 0.0 && e.horizon.is_finite()) {
            return Err(config_err("experiment.horizon", format!("must be positive, got {}", e.horizon)));
        }
        if !(e.dt > 0.0) {
            return Err(config_err("experiment.dt", format!("must be positive, got {}", e.dt)));
        }
        step_count(0.0, e.horizon, e.dt).map_err(|err| config_err("experiment.dt", err))?;
        if e.paths < 2 {
            return Err(config_err("experiment.paths", "need at least 2 paths"));
        }
        if let Some(l) = e.lambda {
            if !(l > 0.0) {
                return Err(config_err("experiment.lambda", format!("must be positive, got {l}")));
            }
        }
        for (name, v) in [("start", &e.start), ("partner", &e.partner), ("direction", &e.direction)] {
            if v.len() > d || v.iter().any(|x| !x.is_finite()) {
                return Err(config_err(&format!("experiment.{name}"), format!("needs at most {d} finite entries")));
            }
        }
        if e.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(config_err("experiment.radii", "radii must be positive"));
        }
        if e.separations.iter().any(|r| !(*r > 0.0)) {
            return Err(config_err("experiment.separations", "separations must be positive"));
        }
        if e.levels.iter().any(|n| *n == 0 || *n > d) {
            return Err(config_err("experiment.levels", format!("levels must lie in 1..={d}")));
        }
        if !(e.harnack_p > 1.0) {
            return Err(config_err("experiment.harnack_p", "must exceed 1"));
        }
        for t in &e.times {
            if !(*t > 0.0 && *t <= e.horizon) {
                return Err(config_err("experiment.times", format!("{t} is outside (0, horizon]")));
            }
            step_count(0.0, *t, e.dt).map_err(|err| config_err("experiment.times", err))?;
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<SpectralOperator> {
        SpectralOperator::new(self.operator.eigenvalues.clone(), self.operator.dim, self.operator.trace_exponent)
            .map_err(|e| config_err("operator", e))
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet> {
        let d = self.operator.dim;
        let set = match &self.coefficients.custom {
            Some(c) => c.clone(),
            None => self.coefficients.preset.build(d).map_err(|e| config_err("coefficients.preset", e))?,
        };
        set.validate(d).map_err(|e| config_err("coefficients", e))?;
        Ok(set)
    }

    pub fn start(&self) -> Vec<f64> {
        padded(&self.experiment.start, self.operator.dim)
    }

    pub fn partner(&self) -> Vec<f64> {
        padded(&self.experiment.partner, self.operator.dim)
    }

    pub fn direction(&self) -> Vec<f64> {
        padded(&self.experiment.direction, self.operator.dim)
    }

    pub fn solver(&self) -> USolverConfig {
        USolverConfig { horizon: self.experiment.horizon, ..self.experiment.solver.clone() }
    }

    pub fn levels(&self) -> Vec<usize> {
        if !self.experiment.levels.is_empty() {
            return self.experiment.levels.clone();
        }
        let d = self.operator.dim;
        let mut out: Vec<usize> = std::iter::successors(Some(1usize), |n| Some(n * 2)).take_while(|n| *n < d).collect();
        out.push(d);
        out
    }

    pub fn times(&self) -> Vec<f64> {
        if self.experiment.times.is_empty() {
            crate::verify::dyadic_times(1.0 / 64.0, self.experiment.horizon)
        } else {
            self.experiment.times.clone()
        }
    }

    /// The configuration with run-specific fields (seed, output directory) removed.
    pub fn parameters(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("seed");
            m.remove("out");
        }
        Ok(v)
    }
}

/// Sets `key` (segments joined by `__`) in `value` for every variable carrying [`ENV_PREFIX`].
/// Values are parsed as JSON and fall back to plain strings.
pub fn apply_env_overrides(value: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, raw) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(LabError::Config(format!("{k}: malformed override key")));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *value;
        for seg in &path {
            if !node.is_object() {
                *node = Value::Object(Default::default());
            }
            node = node.as_object_mut().expect("object").entry(seg.clone()).or_insert(Value::Null);
        }
        *node = parsed;
    }
    Ok(())
}

/// Leaf paths at which two JSON documents differ.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: String, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), p, out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, String::new(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(RunConfig::from_value(v).unwrap(), cfg);
        assert!(cfg.parameters().unwrap().get("seed").is_none());
    }

    #[test]
    fn schema_errors_name_the_path() {
        let err = RunConfig::from_value(json!({"experiment": {"horizon": -1.0}})).unwrap_err();
        assert!(err.to_string().contains("experiment.horizon"), "{err}");
        let err = RunConfig::from_value(json!({"experiment": {"pathz": 3}})).unwrap_err();
        assert!(err.to_string().contains("experiment"), "{err}");
        let err = RunConfig::from_value(json!({"operator": {"dim": "four"}})).unwrap_err();
        assert!(err.to_string().contains("operator.dim"), "{err}");
    }

    #[test]
    fn env_overrides_nested_keys() {
        let mut v = json!({"experiment": {"paths": 10}});
        apply_env_overrides(
            &mut v,
            env(&[
                ("SPDE_LAB__EXPERIMENT__PATHS", "250"),
                ("SPDE_LAB__COEFFICIENTS__PRESET", "dini"),
                ("SPDE_LAB__EXPERIMENT__SOLVER__POINTS", "17"),
                ("OTHER", "1"),
            ]),
        )
        .unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.experiment.paths, 250);
        assert_eq!(cfg.coefficients.preset, Preset::Dini);
        assert_eq!(cfg.experiment.solver.points, 17);
        assert!(apply_env_overrides(&mut json!({}), env(&[("SPDE_LAB__A____B", "1")])).is_err());
    }

    #[test]
    fn diff_lists_changed_leaves() {
        let a = json!({"x": {"n": 1, "m": 2}, "k": "a"});
        let b = json!({"x": {"n": 3, "m": 2}, "k": "a"});
        assert_eq!(json_diff(&a, &b), vec!["x.n: 1 -> 3".to_string()]);
    }
}
