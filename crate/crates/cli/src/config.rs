//! Run configuration: strict JSON plus dotted-path overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use selftrain::analytic::PerturbativeConfig;
use selftrain::compare::CompareSettings;
use selftrain::hyperopt::{HyperBox, HyperPoint, NelderMeadOptions};
use selftrain::losses::{LossKind, PlLink};
use selftrain::replica::{FixedPointOptions, QuadratureSpec, Scenario};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::Subcommand)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Solve the saddle-point trajectory.
    Solve,
    /// Run finite-size self-training for one or more seeds.
    Simulate,
    /// Compare the replica trajectory with finite-size runs.
    Compare,
    /// Tune ridge strengths and heuristics on the predicted test error.
    Optimize,
    /// Small-ridge continuum dynamics and perturbative checks.
    Analytic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Simulate => "simulate",
            Mode::Compare => "compare",
            Mode::Optimize => "optimize",
            Mode::Analytic => "analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_seeds: usize,
    pub histogram_bins: usize,
    /// Steps whose weight and logit histograms are written; the last step when absent.
    pub histogram_steps: Option<Vec<usize>>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_seeds: 1,
            histogram_bins: 50,
            histogram_steps: None,
            newton_tol: 1e-10,
            newton_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    #[serde(rename = "box")]
    pub hbox: HyperBox,
    pub nelder_mead: NelderMeadOptions,
    /// Starting point; the box midpoint when absent.
    pub init: Option<HyperPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbativeSettings {
    pub slope_grid: Vec<f64>,
    pub lambda_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticConfig {
    /// Points on the continuum curves.
    pub samples: usize,
    /// Curve horizon in units of the time constant of `M`.
    pub horizon: f64,
    /// Also solve the scenario's trajectory and compare it with the curves.
    pub replica: bool,
    pub perturbative: Option<PerturbativeSettings>,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        AnalyticConfig {
            samples: 101,
            horizon: 5.0,
            replica: false,
            perturbative: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub scenario: Scenario,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub solver: FixedPointOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub analytic: AnalyticConfig,
}

/// A rejected configuration, with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn from_core(prefix: &str, e: selftrain::Error) -> ConfigError {
    match e {
        selftrain::Error::InvalidConfig { field, reason } => {
            let path = if field.starts_with(prefix) || prefix.is_empty() {
                field
            } else {
                format!("{prefix}.{field}")
            };
            ConfigError::new(path, reason)
        }
        e => ConfigError::new(prefix, e.to_string()),
    }
}

/// Reads a config file, or the `config` member of a manifest written by an earlier run.
pub fn read_value(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    match v {
        Value::Object(mut m) if m.get("program").and_then(Value::as_str) == Some(crate::PROGRAM) => {
            m.remove("config").ok_or_else(|| ConfigError::new("config", "manifest has no config"))
        }
        v => Ok(v),
    }
}

/// Sets `path` (dot separated) to `raw`, read as JSON when it parses and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new("", format!("override `{assignment}` is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::new(path, "empty path segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut walked = String::new();
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(key);
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::new(walked.clone(), "cannot set a field inside a non-object"))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}

/// Strict deserialization; errors carry the dotted field path.
pub fn parse(value: Value) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut path = e.path().to_string();
        if path == "." {
            path.clear();
        }
        let msg = e.inner().to_string();
        // name the missing field in the path itself
        if let Some(name) = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            let full = if path.is_empty() { name.to_string() } else { format!("{path}.{name}") };
            return ConfigError::new(full, "missing required field");
        }
        ConfigError::new(path, msg)
    })
}

/// Range checks and the fields each mode needs.
pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let sc = &cfg.scenario;
    sc.validate().map_err(|e| from_core("scenario", e))?;
    cfg.quadrature.validate().map_err(|e| from_core("quadrature", e))?;
    cfg.solver.validate().map_err(|e| from_core("solver", e))?;
    let t_max = sc.mixture.n_batches;
    match cfg.mode {
        Mode::Solve => {}
        Mode::Simulate => {
            let s = &cfg.simulate;
            if s.n_seeds == 0 {
                return Err(ConfigError::new("simulate.n_seeds", "must be positive"));
            }
            if s.histogram_bins < 10 {
                return Err(ConfigError::new("simulate.histogram_bins", "must be at least 10"));
            }
            if s.histogram_steps.as_ref().is_some_and(|v| v.iter().any(|&t| t > t_max)) {
                return Err(ConfigError::new("simulate.histogram_steps", format!("steps must be at most {t_max}")));
            }
            if !(s.newton_tol > 0.0) || s.newton_max_iter == 0 {
                return Err(ConfigError::new("simulate", "newton_tol and newton_max_iter must be positive"));
            }
        }
        Mode::Compare => cfg.compare.validate(t_max).map_err(|e| from_core("compare", e))?,
        Mode::Optimize => {
            let o = &cfg.optimize;
            o.hbox.validate().map_err(|e| from_core("optimize", e))?;
            if o.nelder_mead.max_eval == 0 {
                return Err(ConfigError::new("optimize.nelder_mead.max_eval", "must be positive"));
            }
            if o.hbox.active[3] && sc.loss.pl_link != PlLink::AnnealedSigmoid {
                return Err(ConfigError::new(
                    "optimize.box.active",
                    "tuning the annealing rate needs scenario.loss.pl_link = annealed_sigmoid",
                ));
            }
        }
        Mode::Analytic => {
            let a = &cfg.analytic;
            if a.samples < 2 {
                return Err(ConfigError::new("analytic.samples", "must be at least 2"));
            }
            if !(a.horizon > 0.0 && a.horizon.is_finite()) {
                return Err(ConfigError::new("analytic.horizon", "must be finite and > 0"));
            }
            if !(sc.mixture.alpha_u > 1.0) {
                return Err(ConfigError::new("scenario.mixture.alpha_u", "the continuum limit needs alpha_u > 1"));
            }
            let l = &sc.loss;
            let squared = l.loss == LossKind::Squared && l.pl_loss == LossKind::Squared && l.pl_link == PlLink::Identity;
            if a.replica && !(squared && l.pls_threshold == 0.0) {
                return Err(ConfigError::new(
                    "scenario.loss",
                    "the continuum comparison needs squared losses, identity pseudo-labels and no selection",
                ));
            }
            if let Some(p) = &a.perturbative {
                perturbative_config(sc, p)
                    .validate()
                    .map_err(|e| from_core("analytic.perturbative", e))?;
            }
        }
    }
    Ok(())
}

pub fn perturbative_config(sc: &Scenario, p: &PerturbativeSettings) -> PerturbativeConfig {
    PerturbativeConfig {
        mixture: sc.mixture,
        loss: sc.loss,
        lambda_l: sc.lambda_l,
        slope_grid: p.slope_grid.clone(),
        lambda_rate: p.lambda_rate,
    }
}

/// Loads, overrides, fixes the mode and validates.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    mode: Mode,
    seed: Option<u64>,
) -> Result<RunConfig, ConfigError> {
    let mut value = match path {
        Some(p) => read_value(p)?,
        None => Value::Object(Default::default()),
    };
    if !value.is_object() {
        return Err(ConfigError::new("", "config must be a JSON object"));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let obj = value.as_object_mut().expect("checked above");
    match obj.get("mode") {
        None => {
            obj.insert("mode".into(), Value::String(mode.name().into()));
        }
        Some(Value::String(m)) if m == mode.name() => {}
        Some(other) => {
            return Err(ConfigError::new(
                "mode",
                format!("config asks for {other} but the subcommand is {}", mode.name()),
            ))
        }
    }
    if let Some(s) = seed {
        obj.insert("seed".into(), Value::from(s));
    }
    let cfg = parse(value)?;
    validate(&cfg)?;
    Ok(cfg)
}
