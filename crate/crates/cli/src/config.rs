//! Experiment configuration: JSON schema, sweep expansion and defaults.
//!
//! A config file holds one experiment object or an array of them. Inside an
//! experiment every array value is a sweep axis; an experiment with several
//! axes expands to their cross product, first axis varying slowest.

use std::path::PathBuf;

use blo_core::solvers::{Clock, EtaRule, Method, Mode, StopCriteria};
use blo_core::testbeds::{Spectrum, Z0Spec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema { path: path.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in the run directory name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub problem: ProblemSpec,
    pub method: MethodSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub stop: StopSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_trace_every")]
    pub trace_every: u64,
    #[serde(default)]
    pub clock: ClockSpec,
}

fn default_trace_every() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        n: usize,
        #[serde(default)]
        spectrum: SpectrumSpec,
        #[serde(default)]
        z0: Z0Choice,
    },
    Multimin {},
    Hypercleaning(HyperCleaningSpec),
}

impl ProblemSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ProblemSpec::Quadratic { .. } => "quadratic",
            ProblemSpec::Multimin {} => "multimin",
            ProblemSpec::Hypercleaning(_) => "hypercleaning",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    #[default]
    Identity,
    LogUniform { min: f64, max: f64 },
}

impl From<SpectrumSpec> for Spectrum {
    fn from(s: SpectrumSpec) -> Self {
        match s {
            SpectrumSpec::Identity => Spectrum::Identity,
            SpectrumSpec::LogUniform { min, max } => Spectrum::LogUniform { min, max },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Z0Choice {
    #[default]
    Ones,
    Random,
}

impl From<Z0Choice> for Z0Spec {
    fn from(z: Z0Choice) -> Self {
        match z {
            Z0Choice::Ones => Z0Spec::Ones,
            Z0Choice::Random => Z0Spec::Random,
        }
    }
}

/// Data hyper-cleaning. Synthetic Gaussian blobs unless IDX or CSV paths are given.
///
/// File-backed data is split in file order: the first `n_train` samples train,
/// the next `n_val` validate, unless separate validation files are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperCleaningSpec {
    #[serde(default = "HyperCleaningSpec::default_classes")]
    pub classes: usize,
    #[serde(default = "HyperCleaningSpec::default_dim")]
    pub dim: usize,
    #[serde(default = "HyperCleaningSpec::default_separation")]
    pub separation: f64,
    /// Defaults to 1000 for synthetic data and 5000 for files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    /// Defaults to 500 for synthetic data and 5000 for files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    #[serde(default = "HyperCleaningSpec::default_rho")]
    pub rho: f64,
    #[serde(default = "HyperCleaningSpec::default_reg")]
    pub reg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_val_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_val_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_val: Option<PathBuf>,
}

impl HyperCleaningSpec {
    fn default_classes() -> usize {
        10
    }
    fn default_dim() -> usize {
        20
    }
    fn default_separation() -> f64 {
        3.0
    }
    fn default_rho() -> f64 {
        0.3
    }
    fn default_reg() -> f64 {
        blo_core::testbeds::HyperCleaningProblem::DEFAULT_REG
    }

    pub fn uses_files(&self) -> bool {
        self.idx_images.is_some() || self.csv_train.is_some()
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let (tr, va) = if self.uses_files() { (5000, 5000) } else { (1000, 500) };
        (self.n_train.unwrap_or(tr), self.n_val.unwrap_or(va))
    }
}

impl Default for HyperCleaningSpec {
    fn default() -> Self {
        HyperCleaningSpec {
            classes: Self::default_classes(),
            dim: Self::default_dim(),
            separation: Self::default_separation(),
            n_train: None,
            n_val: None,
            rho: Self::default_rho(),
            reg: Self::default_reg(),
            idx_images: None,
            idx_labels: None,
            idx_val_images: None,
            idx_val_labels: None,
            csv_train: None,
            csv_val: None,
        }
    }
}

/// Method name plus the parameters that apply to it.
///
/// Defaults: `T = 100` for `rhg` and `bda`, `T = 10` inner steps for the
/// implicit methods, `eps = 1e-8`, `M = 100`, `mu = 0.1`, `lambda = 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl MethodSpec {
    pub fn named(name: &str) -> Self {
        MethodSpec { name: name.to_string(), ..Default::default() }
    }

    /// Resolves the solver selection, rejecting parameters the method does not take.
    pub fn to_method(&self) -> Result<Method, ConfigError> {
        let allowed: &[&str] = match self.name.as_str() {
            "bagdc" | "nosa" => &[],
            "rhg" => &["T"],
            "implicit-cg" => &["T", "eps"],
            "implicit-ns" => &["T", "M"],
            "bda" => &["T", "mu", "lambda"],
            other => {
                return Err(schema(
                    "method.name",
                    format!("unknown method `{other}`; expected one of {}", Method::NAMES.join(", ")),
                ))
            }
        };
        let given = [("T", self.t.is_some()), ("eps", self.eps.is_some()), ("M", self.m.is_some()), ("mu", self.mu.is_some()), ("lambda", self.lambda.is_some())];
        if let Some((key, _)) = given.iter().find(|(k, set)| *set && !allowed.contains(k)) {
            return Err(schema(format!("method.{key}"), format!("not a parameter of `{}`", self.name)));
        }
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(schema(format!("method.{key}"), format!("must be positive and finite, got {v}")))
            }
        };
        let count = |key: &str, v: usize| if v >= 1 { Ok(v) } else { Err(schema(format!("method.{key}"), "must be at least 1")) };
        Ok(match self.name.as_str() {
            "bagdc" => Method::Bagdc,
            "nosa" => Method::Nosa,
            "rhg" => Method::Rhg { t: count("T", self.t.unwrap_or(100))? },
            "implicit-cg" => Method::ImplicitCg { t: count("T", self.t.unwrap_or(10))?, eps: positive("eps", self.eps.unwrap_or(1e-8))? },
            "implicit-ns" => Method::ImplicitNs { t: count("T", self.t.unwrap_or(10))?, m: count("M", self.m.unwrap_or(100))? },
            "bda" => {
                let mu = self.mu.unwrap_or(0.1);
                if !(mu > 0.0 && mu < 1.0) {
                    return Err(schema("method.mu", format!("must lie in (0, 1), got {mu}")));
                }
                Method::Bda { t: count("T", self.t.unwrap_or(100))?, mu, lambda: positive("lambda", self.lambda.unwrap_or(1.0))? }
            }
            _ => unreachable!("name validated above"),
        })
    }

    /// The same spec with every default written out.
    pub fn filled(&self) -> Result<MethodSpec, ConfigError> {
        let mut out = MethodSpec::named(&self.name);
        match self.to_method()? {
            Method::Bagdc | Method::Nosa => {}
            Method::Rhg { t } => out.t = Some(t),
            Method::ImplicitCg { t, eps } => (out.t, out.eps) = (Some(t), Some(eps)),
            Method::ImplicitNs { t, m } => (out.t, out.m) = (Some(t), Some(m)),
            Method::Bda { t, mu, lambda } => (out.t, out.mu, out.lambda) = (Some(t), Some(mu), Some(lambda)),
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    StronglyConvex,
    MerelyConvex,
}

impl From<ModeSpec> for Mode {
    fn from(m: ModeSpec) -> Self {
        match m {
            ModeSpec::StronglyConvex => Mode::StronglyConvex,
            ModeSpec::MerelyConvex => Mode::MerelyConvex,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRuleSpec {
    #[default]
    Fixed,
    Adaptive,
}

impl From<EtaRuleSpec> for EtaRule {
    fn from(r: EtaRuleSpec) -> Self {
        match r {
            EtaRuleSpec::Fixed => EtaRule::Fixed,
            EtaRuleSpec::Adaptive => EtaRule::Adaptive,
        }
    }
}

/// Step-size schedule. Unset values get per-family defaults once the problem
/// is built (see [`crate::runner::resolve_schedule`]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub eta_rule: EtaRuleSpec,
}

/// Termination. With nothing set the run stops after 1000 iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_norm_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_tol: Option<f64>,
}

impl StopSpec {
    pub const DEFAULT_MAX_ITERS: u64 = 1000;

    pub fn criteria(&self) -> StopCriteria {
        let c = StopCriteria { max_iters: self.max_iters, max_seconds: self.max_seconds, d_norm_tol: self.d_norm_tol, kkt_tol: self.kkt_tol };
        if c.is_set() {
            c
        } else {
            StopCriteria { max_iters: Some(Self::DEFAULT_MAX_ITERS), ..c }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSpec {
    #[default]
    Monotonic,
    Frozen,
}

impl From<ClockSpec> for Clock {
    fn from(c: ClockSpec) -> Self {
        match c {
            ClockSpec::Monotonic => Clock::Monotonic,
            ClockSpec::Frozen => Clock::Frozen,
        }
    }
}

impl ExperimentConfig {
    /// Minimal config for `problem` and `method` with every other field defaulted.
    pub fn new(problem: ProblemSpec, method: MethodSpec) -> Self {
        ExperimentConfig {
            name: None,
            problem,
            method,
            schedule: ScheduleSpec::default(),
            stop: StopSpec::default(),
            seed: 0,
            output: None,
            trace_every: 1,
            clock: ClockSpec::Monotonic,
        }
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.method.to_method()?;
        if self.trace_every == 0 {
            return Err(schema("trace_every", "must be at least 1"));
        }
        match &self.problem {
            ProblemSpec::Quadratic { n, spectrum, .. } => {
                if *n == 0 {
                    return Err(schema("problem.n", "must be at least 1"));
                }
                if let SpectrumSpec::LogUniform { min, max } = spectrum {
                    if !(*min > 0.0 && max >= min && max.is_finite()) {
                        return Err(schema("problem.spectrum.log_uniform", format!("needs 0 < min <= max, got [{min}, {max}]")));
                    }
                }
            }
            ProblemSpec::Multimin {} => {}
            ProblemSpec::Hypercleaning(h) => {
                if !(0.0..=1.0).contains(&h.rho) {
                    return Err(schema("problem.rho", format!("must lie in [0, 1], got {}", h.rho)));
                }
                if !(h.reg > 0.0) {
                    return Err(schema("problem.reg", "must be positive"));
                }
                if h.idx_images.is_some() != h.idx_labels.is_some() {
                    return Err(schema("problem.idx_labels", "idx_images and idx_labels must be given together"));
                }
                if h.idx_val_images.is_some() != h.idx_val_labels.is_some() {
                    return Err(schema("problem.idx_val_labels", "idx_val_images and idx_val_labels must be given together"));
                }
                if h.idx_images.is_some() && h.csv_train.is_some() {
                    return Err(schema("problem.csv_train", "give either IDX or CSV training data, not both"));
                }
                let (tr, va) = h.split_sizes();
                if tr == 0 || va == 0 {
                    return Err(schema("problem.n_train", "train and validation sizes must be at least 1"));
                }
                if !h.uses_files() && (h.classes < 2 || h.dim == 0) {
                    return Err(schema("problem.classes", "synthetic data needs classes >= 2 and dim >= 1"));
                }
            }
        }
        let s = &self.schedule;
        for (key, v) in [("alpha", s.alpha), ("beta", s.beta), ("eta", s.eta), ("lambda", s.lambda), ("mu_bar", s.mu_bar), ("p", s.p)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(schema(format!("schedule.{key}"), format!("must be positive and finite, got {v}")));
                }
            }
        }
        if let Some(m) = s.mu_bar {
            if m > 0.5 {
                return Err(schema("schedule.mu_bar", format!("must not exceed 0.5, got {m}")));
            }
        }
        if let Some(p) = s.p {
            if p >= 1.0 / 11.0 {
                return Err(schema("schedule.p", format!("must lie in (0, 1/11), got {p}")));
            }
        }
        let st = &self.stop;
        for (key, v) in [("max_seconds", st.max_seconds), ("d_norm_tol", st.d_norm_tol), ("kkt_tol", st.kkt_tol)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(schema(format!("stop.{key}"), format!("must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    /// Config echo with method defaults written out.
    pub fn echo(&self) -> Value {
        let mut c = self.clone();
        if let Ok(m) = self.method.filled() {
            c.method = m;
        }
        serde_json::to_value(&c).expect("config serializes")
    }

    /// Directory name stem: the explicit name, or `family-method`.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}-{}", self.problem.family(), self.method.name))
    }
}

/// Parses a config file: one experiment object or an array of them, each
/// expanded over its sweep axes, then validated.
pub fn parse_config(text: &str) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let root: Value = serde_json::from_str(text)?;
    let entries: Vec<(String, Value)> = match root {
        Value::Array(items) => items.into_iter().enumerate().map(|(i, v)| (format!("[{i}]."), v)).collect(),
        v @ Value::Object(_) => vec![(String::new(), v)],
        _ => return Err(schema("$", "expected an experiment object or an array of them")),
    };
    let mut out = Vec::new();
    for (prefix, entry) in entries {
        if !entry.is_object() {
            return Err(schema(format!("{}$", prefix), "expected an experiment object"));
        }
        for expanded in expand_sweeps(&entry) {
            let cfg: ExperimentConfig = serde_path_to_error::deserialize(&expanded).map_err(|e| {
                let path = e.path().to_string();
                schema(format!("{prefix}{path}"), e.into_inner().to_string())
            })?;
            cfg.validate().map_err(|e| match e {
                ConfigError::Schema { path, message } => schema(format!("{prefix}{path}"), message),
                other => other,
            })?;
            out.push(cfg);
        }
    }
    Ok(out)
}

pub fn load_config(path: &std::path::Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

/// Cross product over every array in `v`, in key order (keys sorted), first axis slowest.
pub fn expand_sweeps(v: &Value) -> Vec<Value> {
    match v {
        Value::Array(items) => items.iter().flat_map(expand_sweeps).collect(),
        Value::Object(map) => {
            let mut acc = vec![serde_json::Map::new()];
            for (key, child) in map {
                let options = expand_sweeps(child);
                let mut next = Vec::with_capacity(acc.len() * options.len());
                for partial in &acc {
                    for opt in &options {
                        let mut m = partial.clone();
                        m.insert(key.clone(), opt.clone());
                        next.push(m);
                    }
                }
                acc = next;
            }
            acc.into_iter().map(Value::Object).collect()
        }
        other => vec![other.clone()],
    }
}
