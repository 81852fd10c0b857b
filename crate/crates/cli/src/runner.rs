//! Builds problems from configs, runs them, and writes per-run artifacts.
//!
//! Each run gets its own directory holding `trace.csv` and `summary.json`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use blo_core::metrics::{AnalyticOracle, Iterate, QuadraticOracle, TraceRecord, TraceSink, TRACE_COLUMNS};
use blo_core::problem::fd_check_gradients;
use blo_core::solvers::{estimate_lipschitz, run_solver, Mode, RunOptions, RunStatus, RunSummary, ScheduleConfig, SolverState};
use blo_core::testbeds::{
    corrupt_labels, f1_clean, load_csv, load_idx, make_multimin, make_quadratic, synth_split, Dataset, HyperCleaningProblem,
    MultiMinimizerBilevel, MultiMinimizerOracle, QuadraticBilevel, TestbedError,
};
use blo_core::vecmat::{gaussian_vector, Vector};
use blo_core::BilevelProblem;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, HyperCleaningSpec, ModeSpec, ProblemSpec};

/// Output root used when neither `--out` nor the config names one.
pub const DEFAULT_OUTPUT: &str = "blo-out";

pub enum BuiltProblem {
    Quadratic(QuadraticBilevel, QuadraticOracle),
    Multimin(MultiMinimizerBilevel, MultiMinimizerOracle),
    HyperCleaning(HyperCleaningProblem),
}

impl BuiltProblem {
    pub fn build(spec: &ProblemSpec, seed: u64) -> Result<Self, TestbedError> {
        Ok(match spec {
            ProblemSpec::Quadratic { n, spectrum, z0 } => {
                let (p, o) = make_quadratic(*n, (*spectrum).into(), (*z0).into(), seed)?;
                BuiltProblem::Quadratic(p, o)
            }
            ProblemSpec::Multimin {} => {
                let (p, o) = make_multimin();
                BuiltProblem::Multimin(p, o)
            }
            ProblemSpec::Hypercleaning(h) => BuiltProblem::HyperCleaning(build_hypercleaning(h, seed)?),
        })
    }

    pub fn problem(&self) -> &dyn BilevelProblem {
        match self {
            BuiltProblem::Quadratic(p, _) => p,
            BuiltProblem::Multimin(p, _) => p,
            BuiltProblem::HyperCleaning(p) => p,
        }
    }

    pub fn oracle(&self) -> Option<&dyn AnalyticOracle> {
        match self {
            BuiltProblem::Quadratic(_, o) => Some(o),
            BuiltProblem::Multimin(_, o) => Some(o),
            BuiltProblem::HyperCleaning(_) => None,
        }
    }

    pub fn hypercleaning(&self) -> Option<&HyperCleaningProblem> {
        match self {
            BuiltProblem::HyperCleaning(p) => Some(p),
            _ => None,
        }
    }
}

fn take(ds: Dataset, n: usize, what: &'static str) -> Result<Dataset, TestbedError> {
    if ds.len() < n {
        return Err(TestbedError::DimensionMismatch { what, expected: n, found: ds.len() });
    }
    ds.slice(0..n)
}

/// Loads or synthesizes the data and corrupts `ρ` of the training labels.
pub fn build_hypercleaning(h: &HyperCleaningSpec, seed: u64) -> Result<HyperCleaningProblem, TestbedError> {
    let (n_train, n_val) = h.split_sizes();
    let (train, val) = if h.uses_files() {
        let all = match (&h.idx_images, &h.idx_labels, &h.csv_train) {
            (Some(img), Some(lab), _) => load_idx(img, lab)?,
            (_, _, Some(csv)) => load_csv(csv)?,
            _ => return Err(TestbedError::InvalidParameter("training data paths are incomplete".into())),
        };
        let separate = match (&h.idx_val_images, &h.idx_val_labels, &h.csv_val) {
            (Some(img), Some(lab), _) => Some(load_idx(img, lab)?),
            (_, _, Some(csv)) => Some(load_csv(csv)?),
            _ => None,
        };
        match separate {
            Some(v) => (take(all, n_train, "training samples")?, take(v, n_val, "validation samples")?),
            None => {
                let both = take(all, n_train + n_val, "training + validation samples")?;
                (both.slice(0..n_train)?, both.slice(n_train..n_train + n_val)?)
            }
        }
    } else {
        synth_split(h.classes, h.dim, n_train, n_val, h.separation, seed)?
    };
    let classes = train.num_classes().max(val.num_classes());
    let (train, val) = (train.with_num_classes(classes)?, val.with_num_classes(classes)?);
    let train = corrupt_labels(&train, h.rho, seed.wrapping_add(1))?;
    HyperCleaningProblem::new(train, val, h.reg)
}

/// Fills unset schedule values with per-family defaults.
///
/// - quadratic: `ᾱ = 0.1/L̂`, `β̄ = η̄ = 1/L̂` with `L̂` a power-iteration estimate;
/// - multimin (merely convex): `ᾱ = 2000`, `β̄ = 1`, `η̄ = 16`;
/// - hypercleaning: `ᾱ = 1000`, `β̄ = η̄ = min(1, 1/L̂)`. The weight gradient
///   carries a `1/N` factor, hence the large `ᾱ`.
///
/// Returns the schedule and `L̂` when one was estimated.
pub fn resolve_schedule(cfg: &ExperimentConfig, built: &BuiltProblem) -> (ScheduleConfig, Option<f64>) {
    let s = &cfg.schedule;
    let mode = s.mode.unwrap_or(match cfg.problem {
        ProblemSpec::Multimin {} => ModeSpec::MerelyConvex,
        _ => ModeSpec::StronglyConvex,
    });
    let needs_l = s.alpha.is_none() || s.beta.is_none() || s.eta.is_none();
    let l_hat = match (&cfg.problem, mode, needs_l) {
        (_, _, false) | (ProblemSpec::Multimin {}, ModeSpec::MerelyConvex, _) => None,
        _ => {
            let p = built.problem();
            let zeros = SolverState::zeros(p);
            Some(estimate_lipschitz(p, &zeros.x, &zeros.y, 100, cfg.seed).max(1e-12))
        }
    };
    let (alpha, beta, eta) = match (&cfg.problem, l_hat) {
        (ProblemSpec::Hypercleaning(_), Some(l)) => (1000.0, (1.0 / l).min(1.0), (1.0 / l).min(1.0)),
        (_, Some(l)) => (0.1 / l, 1.0 / l, 1.0 / l),
        (_, None) => (2000.0, 1.0, 16.0),
    };
    let mode: Mode = mode.into();
    let base = ScheduleConfig::strongly_convex(s.alpha.unwrap_or(alpha), s.beta.unwrap_or(beta), s.eta.unwrap_or(eta));
    let schedule = ScheduleConfig {
        mode,
        mu_bar: match mode {
            Mode::MerelyConvex => s.mu_bar.unwrap_or(ScheduleConfig::DEFAULT_MU_BAR),
            Mode::StronglyConvex => s.mu_bar.unwrap_or(base.mu_bar),
        },
        p: s.p.unwrap_or(ScheduleConfig::DEFAULT_P),
        lambda: s.lambda.unwrap_or(ScheduleConfig::DEFAULT_LAMBDA),
        eta_rule: s.eta_rule.into(),
        ..base
    };
    (schedule, l_hat)
}

pub fn schedule_json(s: &ScheduleConfig) -> Value {
    json!({
        "mode": match s.mode { Mode::StronglyConvex => "strongly-convex", Mode::MerelyConvex => "merely-convex" },
        "alpha": s.alpha_bar,
        "beta": s.beta_bar,
        "eta": s.eta_bar,
        "mu_bar": s.mu_bar,
        "p": s.p,
        "lambda": s.lambda,
        "eta_rule": match s.eta_rule { blo_core::solvers::EtaRule::Fixed => "fixed", blo_core::solvers::EtaRule::Adaptive => "adaptive" },
    })
}

/// Validation accuracy and clean-sample F1 at one traced hyper-cleaning row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyPoint {
    pub k: u64,
    pub wall_seconds: f64,
    pub val_accuracy: f64,
    pub f1_clean: f64,
}

struct RunSink<'a, W: Write> {
    csv: csv::Writer<W>,
    records: Option<&'a mut Vec<TraceRecord>>,
    accuracy: Option<(&'a HyperCleaningProblem, &'a mut Vec<AccuracyPoint>)>,
}

impl<W: Write> TraceSink for RunSink<'_, W> {
    fn record(&mut self, record: &TraceRecord, iterate: Iterate<'_>) -> io::Result<()> {
        self.csv.write_record(record.to_row()).map_err(io::Error::other)?;
        if let Some(r) = self.records.as_deref_mut() {
            r.push(*record);
        }
        if let Some((p, acc)) = self.accuracy.as_mut() {
            acc.push(AccuracyPoint {
                k: record.k,
                wall_seconds: record.wall_seconds,
                val_accuracy: p.val_accuracy(iterate.y),
                f1_clean: f1_clean(iterate.x, p.train().clean_mask(), 0.5),
            });
        }
        Ok(())
    }
}

/// Writes the exact trace header followed by one row per record.
pub fn write_trace_csv<W: Write>(out: W, records: &[TraceRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.flush()?;
    Ok(())
}

pub fn record_json(r: &TraceRecord) -> Value {
    let mut m = serde_json::Map::new();
    for (key, cell) in TRACE_COLUMNS.iter().zip(r.to_row()) {
        let v = if cell.is_empty() {
            Value::Null
        } else if let Ok(i) = cell.parse::<u64>() {
            json!(i)
        } else {
            cell.parse::<f64>().ok().and_then(|f| serde_json::Number::from_f64(f)).map_or(Value::String(cell), Value::Number)
        };
        m.insert((*key).to_string(), v);
    }
    Value::Object(m)
}

fn status_fields(status: &RunStatus, out: &mut serde_json::Map<String, Value>) {
    out.insert("status".into(), json!(status.label()));
    match status {
        RunStatus::Converged { criterion } => {
            out.insert("criterion".into(), json!(criterion));
        }
        RunStatus::Diverged { at_iteration, variable } => {
            out.insert("at_iteration".into(), json!(at_iteration));
            out.insert("variable".into(), json!(variable));
        }
        RunStatus::Failed { at_iteration, message } => {
            out.insert("at_iteration".into(), json!(at_iteration));
            out.insert("message".into(), json!(message));
        }
        RunStatus::MaxIters | RunStatus::TimeLimit => {}
    }
}

pub fn summary_json(
    name: &str,
    cfg: &ExperimentConfig,
    summary: &RunSummary,
    schedule: Option<(&ScheduleConfig, Option<f64>)>,
    extras: Option<Value>,
) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("name".into(), json!(name));
    m.insert("method".into(), json!(cfg.method.name));
    status_fields(&summary.status, &mut m);
    m.insert("iterations".into(), json!(summary.iterations));
    m.insert("wall_seconds".into(), json!(summary.wall_seconds));
    m.insert("final_metrics".into(), summary.final_record.as_ref().map_or(Value::Null, record_json));
    m.insert(
        "totals".into(),
        json!({"gradients": summary.total_cost.gradients, "hvps": summary.total_cost.hvps, "jvps": summary.total_cost.jvps}),
    );
    if let Some((s, l)) = schedule {
        m.insert("schedule".into(), schedule_json(s));
        m.insert("lipschitz_estimate".into(), json!(l));
    }
    if let Some(e) = extras {
        m.insert("extras".into(), e);
    }
    m.insert("config".into(), cfg.echo());
    m.insert("library_version".into(), json!(blo_core::VERSION));
    Value::Object(m)
}

fn write_json(path: &Path, v: &Value) -> io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()
}

/// What to keep in memory besides the files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub records: bool,
    /// Hyper-cleaning accuracy and F1 at every traced row.
    pub accuracy: bool,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub name: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub summary: Value,
    pub records: Vec<TraceRecord>,
    pub accuracy: Vec<AccuracyPoint>,
}

impl RunReport {
    pub fn is_error(&self) -> bool {
        self.status.is_error()
    }
}

fn failed(name: &str, dir: PathBuf, cfg: &ExperimentConfig, message: String) -> RunReport {
    let summary = RunSummary {
        method: blo_core::solvers::Method::NAMES.iter().find(|n| **n == cfg.method.name).copied().unwrap_or("unknown"),
        status: RunStatus::Failed { at_iteration: 0, message },
        iterations: 0,
        wall_seconds: 0.0,
        final_record: None,
        total_cost: Default::default(),
    };
    let json = summary_json(name, cfg, &summary, None, None);
    if fs::create_dir_all(&dir).is_ok() {
        let _ = write_json(&dir.join("summary.json"), &json);
    }
    RunReport { name: name.to_string(), dir, status: summary.status, summary: json, records: Vec::new(), accuracy: Vec::new() }
}

/// Runs one experiment into `dir` (created if needed).
pub fn run_one(cfg: &ExperimentConfig, name: &str, dir: &Path, capture: Capture) -> RunReport {
    let dir = dir.to_path_buf();
    let method = match cfg.method.to_method() {
        Ok(m) => m,
        Err(e) => return failed(name, dir, cfg, e.to_string()),
    };
    let built = match BuiltProblem::build(&cfg.problem, cfg.seed) {
        Ok(b) => b,
        Err(e) => return failed(name, dir, cfg, format!("problem construction: {e}")),
    };
    let (schedule, l_hat) = resolve_schedule(cfg, &built);
    if let Err(e) = fs::create_dir_all(&dir) {
        return failed(name, dir.clone(), cfg, format!("{}: {e}", dir.display()));
    }
    let trace_path = dir.join("trace.csv");
    let file = match File::create(&trace_path) {
        Ok(f) => f,
        Err(e) => return failed(name, dir, cfg, format!("{}: {e}", trace_path.display())),
    };
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    if let Err(e) = csv.write_record(TRACE_COLUMNS) {
        return failed(name, dir, cfg, e.to_string());
    }

    let mut records = Vec::new();
    let mut accuracy = Vec::new();
    let hc = built.hypercleaning();
    let outcome = {
        let mut sink = RunSink {
            csv,
            records: capture.records.then_some(&mut records),
            accuracy: match (capture.accuracy, hc) {
                (true, Some(p)) => Some((p, &mut accuracy)),
                _ => None,
            },
        };
        let options = RunOptions { clock: cfg.clock.into(), trace_every: cfg.trace_every };
        let outcome = run_solver(built.problem(), &method, &schedule, &cfg.stop.criteria(), None, built.oracle(), &mut sink, options);
        if let Err(e) = sink.csv.flush() {
            return failed(name, dir, cfg, format!("{}: {e}", trace_path.display()));
        }
        outcome
    };

    let extras = hc.map(|p| {
        json!({
            "val_accuracy": p.val_accuracy(&outcome.state.y),
            "train_accuracy": p.train_accuracy(&outcome.state.y),
            "f1_clean": f1_clean(&outcome.state.x, p.train().clean_mask(), 0.5),
            "n_train": p.train().len(),
        })
    });
    let json = summary_json(name, cfg, &outcome.summary, Some((&schedule, l_hat)), extras);
    let mut status = outcome.summary.status.clone();
    if let Err(e) = write_json(&dir.join("summary.json"), &json) {
        status = RunStatus::Failed { at_iteration: outcome.summary.iterations, message: format!("summary.json: {e}") };
    }
    RunReport { name: name.to_string(), dir, status, summary: json, records, accuracy }
}

/// Orchestration settings shared by every run of a batch.
#[derive(Clone, Debug, Default)]
pub struct RunnerOptions {
    /// Maximum number of runs executing at once; 0 means one.
    pub parallelism: usize,
    /// Overrides the output directory of every config.
    pub out: Option<PathBuf>,
    pub capture: Capture,
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

/// Directory for run `index` of a batch.
pub fn run_dir(cfg: &ExperimentConfig, index: usize, out: Option<&Path>) -> (String, PathBuf) {
    let name = format!("{index:03}-{}", sanitize(&cfg.label()));
    let root = out.map(Path::to_path_buf).or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let dir = root.join(&name);
    (name, dir)
}

/// Runs every config, at most `parallelism` at a time. Reports come back in
/// config order; every run is sequential and independent of scheduling.
pub fn run_experiments(configs: &[ExperimentConfig], options: &RunnerOptions) -> Vec<RunReport> {
    let job = |i: usize| {
        let (name, dir) = run_dir(&configs[i], i, options.out.as_deref());
        run_one(&configs[i], &name, &dir, options.capture)
    };
    map_bounded(configs.len(), options.parallelism, job)
}

#[cfg(feature = "parallel")]
fn map_bounded<T: Send>(n: usize, parallelism: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    if n == 0 {
        return Vec::new();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_bounded<T: Send>(n: usize, _parallelism: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// `0` when no run errored, `1` otherwise.
pub fn exit_code(reports: &[RunReport]) -> i32 {
    i32::from(reports.iter().any(RunReport::is_error))
}

/// Finite-difference derivative check of one config's problem at a random point.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub label: String,
    pub result: Result<blo_core::problem::FdReport, String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.result.as_ref().is_ok_and(|r| r.all_passed())
    }
}

pub const CHECK_STEP: f64 = 1e-5;
pub const CHECK_TOL: f64 = 1e-4;

pub fn check_config(cfg: &ExperimentConfig) -> CheckReport {
    let result = BuiltProblem::build(&cfg.problem, cfg.seed).map_err(|e| e.to_string()).map(|b| {
        let p = b.problem();
        let x = gaussian_vector(p.ul_dim(), cfg.seed);
        let y: Vector = gaussian_vector(p.ll_dim(), cfg.seed.wrapping_add(1)).scaled(0.5);
        fd_check_gradients(p, &x, &y, CHECK_STEP, CHECK_TOL, cfg.seed)
    });
    CheckReport { label: cfg.label(), result }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, MethodSpec, SpectrumSpec, Z0Choice};

    fn quadratic() -> ExperimentConfig {
        ExperimentConfig::new(ProblemSpec::Quadratic { n: 3, spectrum: SpectrumSpec::Identity, z0: Z0Choice::Ones }, MethodSpec::named("bagdc"))
    }

    #[test]
    fn quadratic_defaults_follow_the_lipschitz_estimate() {
        let cfg = quadratic();
        let built = BuiltProblem::build(&cfg.problem, 0).unwrap();
        let (s, l) = resolve_schedule(&cfg, &built);
        let l = l.unwrap();
        assert!((l - 1.0).abs() < 1e-9);
        assert!((s.alpha_bar - 0.1).abs() < 1e-9 && (s.beta_bar - 1.0).abs() < 1e-9);
        assert_eq!(s.mode, Mode::StronglyConvex);
    }

    #[test]
    fn multimin_defaults_are_merely_convex() {
        let cfg = &parse_config(r#"{"problem":{"family":"multimin"},"method":{"name":"bagdc"}}"#).unwrap()[0];
        let built = BuiltProblem::build(&cfg.problem, 0).unwrap();
        let (s, l) = resolve_schedule(cfg, &built);
        assert!(l.is_none());
        assert_eq!(s.mode, Mode::MerelyConvex);
        assert_eq!((s.alpha_bar, s.beta_bar, s.eta_bar), (2000.0, 1.0, 16.0));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn explicit_schedule_values_win() {
        let text = r#"{"problem":{"family":"quadratic","n":2},"method":{"name":"bagdc"},"schedule":{"alpha":0.3,"beta":0.2,"eta":0.1}}"#;
        let cfg = &parse_config(text).unwrap()[0];
        let built = BuiltProblem::build(&cfg.problem, 0).unwrap();
        let (s, l) = resolve_schedule(cfg, &built);
        assert_eq!(l, None);
        assert_eq!((s.alpha_bar, s.beta_bar, s.eta_bar), (0.3, 0.2, 0.1));
    }

    #[test]
    fn record_json_uses_null_for_absent_metrics() {
        let r = TraceRecord { k: 3, d_norm: 0.5, ..Default::default() };
        let v = record_json(&r);
        assert_eq!(v["k"], 3);
        assert_eq!(v["d_norm"], 0.5);
        assert!(v["grad_phi_norm"].is_null());
    }

    #[test]
    fn trace_csv_starts_with_the_exact_header() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[TraceRecord::default()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "k,wall_seconds,ul_value,ll_value,d_norm,kkt_residual,grad_phi_norm,dist_x_rel,dist_y,lyapunov,mu,alpha,beta,eta,hvp_count,jvp_count"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,0,0,0,0,,,,,0,0,0,0,0,0");
    }

    #[test]
    fn synthetic_hypercleaning_split_and_corruption() {
        let spec = HyperCleaningSpec { classes: 3, dim: 2, n_train: Some(20), n_val: Some(10), rho: 0.5, ..Default::default() };
        let p = build_hypercleaning(&spec, 4).unwrap();
        assert_eq!(p.train().len(), 20);
        assert_eq!(p.train().clean_mask().iter().filter(|c| !**c).count(), 10);
    }

    #[test]
    fn check_passes_on_every_family() {
        for text in [
            r#"{"problem":{"family":"quadratic","n":4,"spectrum":{"log_uniform":{"min":0.5,"max":5}}},"method":{"name":"bagdc"}}"#,
            r#"{"problem":{"family":"multimin"},"method":{"name":"bagdc"}}"#,
            r#"{"problem":{"family":"hypercleaning","classes":3,"dim":3,"n_train":12,"n_val":6},"method":{"name":"bagdc"}}"#,
        ] {
            let r = check_config(&parse_config(text).unwrap()[0]);
            assert!(r.passed(), "{r:?}");
        }
    }
}
