//! Pre-baked comparison studies behind `blo reproduce`.
//!
//! Each study expands to a list of labelled runs, executes them with the
//! regular runner, then writes `comparison.csv` (long format: one row per
//! series, iteration and metric), one SVG per chart and `study.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blo_core::metrics::{TraceMetric, TraceRecord};
use blo_core::solvers::{estimate_lipschitz, SolverState};
use serde_json::json;

use crate::config::{
    ClockSpec, EtaRuleSpec, ExperimentConfig, HyperCleaningSpec, MethodSpec, ModeSpec, ProblemSpec, ScheduleSpec, SpectrumSpec,
    StopSpec, Z0Choice,
};
use crate::runner::{run_experiments, BuiltProblem, Capture, RunReport, RunnerOptions};
use crate::svg::{emit_svg, Axes, Scale, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Counterexample,
    EtaSweep,
    LlAccuracy,
    DimensionScaling,
    Multimin,
    Hypercleaning,
}

impl Study {
    pub const ALL: [Study; 6] =
        [Study::Counterexample, Study::EtaSweep, Study::LlAccuracy, Study::DimensionScaling, Study::Multimin, Study::Hypercleaning];

    pub fn name(self) -> &'static str {
        match self {
            Study::Counterexample => "counterexample",
            Study::EtaSweep => "eta-sweep",
            Study::LlAccuracy => "ll-accuracy",
            Study::DimensionScaling => "dimension-scaling",
            Study::Multimin => "multimin",
            Study::Hypercleaning => "hypercleaning",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Study::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<_> = Study::ALL.iter().map(|s| s.name()).collect();
            format!("unknown study `{s}`; expected one of {}", names.join(", "))
        })
    }
}

/// Real data for the hyper-cleaning study.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub val: Option<(PathBuf, PathBuf)>,
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    pub seed: u64,
    pub out: PathBuf,
    pub parallelism: usize,
    pub idx: Option<IdxPaths>,
    pub clock: ClockSpec,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions { seed: 0, out: PathBuf::from(crate::runner::DEFAULT_OUTPUT), parallelism: 1, idx: None, clock: ClockSpec::Monotonic }
    }
}

/// One run of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRun {
    pub series: String,
    pub config: ExperimentConfig,
    /// Deliberately unstable or ill-posed runs whose error is part of the result.
    pub expect_error: bool,
    /// Abscissa for per-run summary charts (the dimension in `dimension-scaling`).
    pub param: Option<f64>,
}

fn run(series: impl Into<String>, config: ExperimentConfig) -> StudyRun {
    let series = series.into();
    StudyRun { config: ExperimentConfig { name: Some(series.clone()), ..config }, series, expect_error: false, param: None }
}

fn quadratic(n: usize, spectrum: SpectrumSpec, z0: Z0Choice) -> ProblemSpec {
    ProblemSpec::Quadratic { n, spectrum, z0 }
}

const LOG_SPECTRUM: SpectrumSpec = SpectrumSpec::LogUniform { min: 0.5, max: 5.0 };

fn cfg(problem: ProblemSpec, method: MethodSpec, schedule: ScheduleSpec, stop: StopSpec, opts: &StudyOptions) -> ExperimentConfig {
    ExperimentConfig { schedule, stop, seed: opts.seed, clock: opts.clock, ..ExperimentConfig::new(problem, method) }
}

fn sched(alpha: f64, beta: f64, eta: f64) -> ScheduleSpec {
    ScheduleSpec { mode: Some(ModeSpec::StronglyConvex), alpha: Some(alpha), beta: Some(beta), eta: Some(eta), ..Default::default() }
}

fn iters(n: u64) -> StopSpec {
    StopSpec { max_iters: Some(n), ..Default::default() }
}

fn method(name: &str, f: impl FnOnce(&mut MethodSpec)) -> MethodSpec {
    let mut m = MethodSpec::named(name);
    f(&mut m);
    m
}

fn lipschitz(problem: &ProblemSpec, seed: u64) -> f64 {
    let built = BuiltProblem::build(problem, seed).expect("study problems are valid");
    let p = built.problem();
    let z = SolverState::zeros(p);
    estimate_lipschitz(p, &z.x, &z.y, 200, seed)
}

/// The runs a study consists of.
pub fn study_runs(study: Study, opts: &StudyOptions) -> Vec<StudyRun> {
    match study {
        Study::Counterexample => {
            let p = quadratic(100, SpectrumSpec::Identity, Z0Choice::Ones);
            let stop = StopSpec { max_iters: Some(5000), d_norm_tol: Some(1e-10), ..Default::default() };
            vec![
                run("nosa beta=0.5", cfg(p.clone(), MethodSpec::named("nosa"), sched(0.5, 0.5, 0.5), stop, opts)),
                run("bagdc", cfg(p, MethodSpec::named("bagdc"), sched(0.1, 0.5, 0.5), stop, opts)),
            ]
        }
        Study::EtaSweep => {
            let p = quadratic(100, LOG_SPECTRUM, Z0Choice::Random);
            let l = lipschitz(&p, opts.seed);
            let stop = StopSpec { max_iters: Some(20_000), d_norm_tol: Some(1e-5), ..Default::default() };
            let mut runs: Vec<StudyRun> = [0.25, 1.0, 50.0]
                .into_iter()
                .map(|c| {
                    let mut r = run(format!("eta={c}/L"), cfg(p.clone(), MethodSpec::named("bagdc"), sched(0.1 / l, 1.0 / l, c / l), stop, opts));
                    r.expect_error = c > 2.0;
                    r
                })
                .collect();
            let adaptive = ScheduleSpec { eta_rule: EtaRuleSpec::Adaptive, ..sched(0.1 / l, 1.0 / l, 1.0 / l) };
            runs.push(run("adaptive", cfg(p, MethodSpec::named("bagdc"), adaptive, stop, opts)));
            runs
        }
        Study::LlAccuracy => {
            let p = quadratic(100, LOG_SPECTRUM, Z0Choice::Random);
            let l = lipschitz(&p, opts.seed);
            let s = sched(1.0 / l, 1.0 / l, 1.0 / l);
            let stop = StopSpec { max_iters: Some(500), max_seconds: Some(30.0), ..Default::default() };
            let mut runs = Vec::new();
            for t in [1, 10, 100] {
                runs.push(run(format!("rhg T={t}"), cfg(p.clone(), method("rhg", |m| m.t = Some(t)), s, stop, opts)));
            }
            for eps in [1e-1, 1e-4, 1e-8] {
                runs.push(run(format!("implicit-cg eps={eps:e}"), cfg(p.clone(), method("implicit-cg", |m| m.eps = Some(eps)), s, stop, opts)));
            }
            for m in [1, 10, 100] {
                runs.push(run(format!("implicit-ns M={m}"), cfg(p.clone(), method("implicit-ns", |x| x.m = Some(m)), s, stop, opts)));
            }
            runs.push(run("bagdc", cfg(p, MethodSpec::named("bagdc"), s, stop, opts)));
            runs
        }
        Study::DimensionScaling => {
            let mut runs = Vec::new();
            for n in [100usize, 1_000, 10_000, 100_000] {
                let p = quadratic(n, LOG_SPECTRUM, Z0Choice::Random);
                let s = sched(0.1 / 5.0, 1.0 / 5.0, 1.0 / 5.0);
                let stop = StopSpec { max_iters: Some(20), max_seconds: Some(10.0), ..Default::default() };
                for m in [MethodSpec::named("bagdc"), method("rhg", |m| m.t = Some(100)), MethodSpec::named("implicit-cg"), MethodSpec::named("implicit-ns")] {
                    let mut r = run(format!("{} n={n}", m.name), cfg(p.clone(), m, s, stop, opts));
                    r.param = Some(n as f64);
                    runs.push(r);
                }
            }
            runs
        }
        Study::Multimin => {
            let p = ProblemSpec::Multimin {};
            let merely = ScheduleSpec { mode: Some(ModeSpec::MerelyConvex), alpha: Some(2000.0), beta: Some(1.0), eta: Some(16.0), ..Default::default() };
            let base = sched(0.5, 1.0, 1.0);
            let mut bagdc = run("bagdc", cfg(p.clone(), MethodSpec::named("bagdc"), merely, iters(200_000), opts));
            bagdc.config.trace_every = 200;
            let mut cg = run("implicit-cg", cfg(p.clone(), MethodSpec::named("implicit-cg"), base, iters(500), opts));
            cg.expect_error = true;
            vec![
                bagdc,
                run("bda mu=0.1 T=500", cfg(p.clone(), method("bda", |m| (m.t, m.mu) = (Some(500), Some(0.1))), base, iters(500), opts)),
                run("rhg T=100", cfg(p.clone(), method("rhg", |m| m.t = Some(100)), base, iters(500), opts)),
                cg,
                run("implicit-ns M=100", cfg(p, method("implicit-ns", |m| m.m = Some(100)), base, iters(500), opts)),
            ]
        }
        Study::Hypercleaning => {
            let spec = match &opts.idx {
                None => HyperCleaningSpec::default(),
                Some(idx) => HyperCleaningSpec {
                    idx_images: Some(idx.train_images.clone()),
                    idx_labels: Some(idx.train_labels.clone()),
                    idx_val_images: idx.val.as_ref().map(|v| v.0.clone()),
                    idx_val_labels: idx.val.as_ref().map(|v| v.1.clone()),
                    ..Default::default()
                },
            };
            let p = ProblemSpec::Hypercleaning(spec);
            let beta = if opts.idx.is_some() { None } else { Some(1.0) };
            let s = ScheduleSpec { mode: Some(ModeSpec::StronglyConvex), alpha: Some(1000.0), beta, eta: beta, ..Default::default() };
            let entries = [
                (MethodSpec::named("bagdc"), 3000, 25),
                (method("rhg", |m| m.t = Some(100)), 100, 2),
                (method("implicit-cg", |m| m.eps = Some(1e-6)), 150, 3),
                (method("implicit-ns", |m| m.m = Some(20)), 150, 3),
            ];
            entries
                .into_iter()
                .map(|(m, n, every)| {
                    let mut r = run(m.name.clone(), cfg(p.clone(), m, s, iters(n), opts));
                    r.config.trace_every = every;
                    r
                })
                .collect()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Svg(#[from] crate::svg::SvgError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io { path: path.display().to_string(), source }
}

pub struct StudyReport {
    pub dir: PathBuf,
    pub runs: Vec<(StudyRun, RunReport)>,
    pub warnings: Vec<String>,
}

impl StudyReport {
    /// Runs that errored although the study did not plan for it.
    pub fn unexpected_errors(&self) -> Vec<&str> {
        self.runs.iter().filter(|(s, r)| r.is_error() && !s.expect_error).map(|(s, _)| s.series.as_str()).collect()
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(!self.unexpected_errors().is_empty())
    }
}

struct Chart {
    file: &'static str,
    title: &'static str,
    x: XAxis,
    metric: Metric,
    y_scale: Scale,
}

#[derive(Clone, Copy)]
enum XAxis {
    Iteration,
    Seconds,
    Param,
}

#[derive(Clone, Copy)]
enum Metric {
    Trace(TraceMetric, &'static str),
    ValAccuracy,
    F1Clean,
    SecondsPerIteration,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Trace(_, n) => n,
            Metric::ValAccuracy => "val_accuracy",
            Metric::F1Clean => "f1_clean",
            Metric::SecondsPerIteration => "seconds_per_iteration",
        }
    }
}

fn trace_metric(m: TraceMetric) -> Metric {
    let name = match m {
        TraceMetric::DNorm => "d_norm",
        TraceMetric::KktResidual => "kkt_residual",
        TraceMetric::GradPhiNorm => "grad_phi_norm",
        TraceMetric::GradPhiNormSq => "grad_phi_norm_sq",
        TraceMetric::DistXRel => "dist_x_rel",
        TraceMetric::DistY => "dist_y",
        TraceMetric::Lyapunov => "lyapunov",
    };
    Metric::Trace(m, name)
}

fn charts(study: Study) -> Vec<Chart> {
    let c = |file, title, x, metric, y_scale| Chart { file, title, x, metric, y_scale };
    let dist = trace_metric(TraceMetric::DistXRel);
    let gphi = trace_metric(TraceMetric::GradPhiNorm);
    match study {
        Study::Counterexample => vec![
            c("dist_x_rel.svg", "Relative distance to x*", XAxis::Iteration, dist, Scale::Log),
            c("grad_phi_norm.svg", "Hypergradient norm", XAxis::Iteration, gphi, Scale::Log),
        ],
        Study::EtaSweep => vec![
            c("d_norm.svg", "Update norm for different eta", XAxis::Iteration, trace_metric(TraceMetric::DNorm), Scale::Log),
            c("dist_x_rel.svg", "Relative distance to x*", XAxis::Iteration, dist, Scale::Log),
        ],
        Study::LlAccuracy => vec![
            c("dist_x_rel_iter.svg", "Relative distance to x* by iteration", XAxis::Iteration, dist, Scale::Log),
            c("dist_x_rel_time.svg", "Relative distance to x* by wall time", XAxis::Seconds, dist, Scale::Log),
            c("grad_phi_norm.svg", "Hypergradient norm", XAxis::Iteration, gphi, Scale::Log),
        ],
        Study::DimensionScaling => {
            vec![c("seconds_per_iteration.svg", "Wall time per outer iteration", XAxis::Param, Metric::SecondsPerIteration, Scale::Log)]
        }
        Study::Multimin => vec![
            c("dist_x.svg", "Distance |x - 1|", XAxis::Iteration, dist, Scale::Log),
            c("kkt_residual.svg", "KKT residual", XAxis::Iteration, trace_metric(TraceMetric::KktResidual), Scale::Log),
        ],
        Study::Hypercleaning => vec![
            c("val_accuracy.svg", "Validation accuracy by wall time", XAxis::Seconds, Metric::ValAccuracy, Scale::Linear),
            c("f1_clean.svg", "Clean-sample F1 by wall time", XAxis::Seconds, Metric::F1Clean, Scale::Linear),
        ],
    }
}

/// `(k, wall_seconds, value)` triples of one metric for one run.
fn metric_points(metric: Metric, report: &RunReport) -> Vec<(u64, f64, f64)> {
    match metric {
        Metric::Trace(m, _) => report.records.iter().filter_map(|r: &TraceRecord| r.metric(m).map(|v| (r.k, r.wall_seconds, v))).collect(),
        Metric::ValAccuracy => report.accuracy.iter().map(|a| (a.k, a.wall_seconds, a.val_accuracy)).collect(),
        Metric::F1Clean => report.accuracy.iter().map(|a| (a.k, a.wall_seconds, a.f1_clean)).collect(),
        Metric::SecondsPerIteration => {
            let iters = report.summary["iterations"].as_u64().unwrap_or(0);
            let wall = report.summary["wall_seconds"].as_f64().unwrap_or(0.0);
            if iters == 0 {
                Vec::new()
            } else {
                vec![(iters, wall, wall / iters as f64)]
            }
        }
    }
}

fn series_method(series: &str) -> &str {
    series.split_whitespace().next().unwrap_or(series)
}

/// Runs the study under `opts.out/<study>/`.
pub fn reproduce(study: Study, opts: &StudyOptions) -> Result<StudyReport, StudyError> {
    let dir = opts.out.join(study.name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let planned = study_runs(study, opts);
    let configs: Vec<ExperimentConfig> = planned.iter().map(|r| r.config.clone()).collect();
    let capture = Capture { records: true, accuracy: study == Study::Hypercleaning };
    let reports = run_experiments(&configs, &RunnerOptions { parallelism: opts.parallelism, out: Some(dir.join("runs")), capture });
    let runs: Vec<(StudyRun, RunReport)> = planned.into_iter().zip(reports).collect();
    let charts = charts(study);

    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_writer(fs::File::create(&path).map_err(io_err(&path))?);
    w.write_record(["series", "method", "param", "k", "wall_seconds", "metric", "value"])?;
    let mut metrics: Vec<Metric> = Vec::new();
    for c in &charts {
        if !metrics.iter().any(|m| m.name() == c.metric.name()) {
            metrics.push(c.metric);
        }
    }
    for (s, r) in &runs {
        let param = s.param.map_or_else(String::new, |p| p.to_string());
        for &m in &metrics {
            for (k, wall, v) in metric_points(m, r) {
                w.write_record([s.series.as_str(), series_method(&s.series), &param, &k.to_string(), &wall.to_string(), m.name(), &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;

    let mut warnings = Vec::new();
    for chart in &charts {
        let series: Vec<Series> = match chart.x {
            XAxis::Param => {
                let mut by_method: Vec<Series> = Vec::new();
                for (s, r) in &runs {
                    let method = series_method(&s.series);
                    let pts: Vec<(f64, f64)> = metric_points(chart.metric, r).into_iter().map(|(_, _, v)| (s.param.unwrap_or(0.0), v)).collect();
                    match by_method.iter_mut().find(|x| x.label == method) {
                        Some(x) => x.points.extend(pts),
                        None => by_method.push(Series::new(method, pts)),
                    }
                }
                by_method
            }
            XAxis::Iteration | XAxis::Seconds => runs
                .iter()
                .map(|(s, r)| {
                    let pts = metric_points(chart.metric, r)
                        .into_iter()
                        .map(|(k, wall, v)| (if matches!(chart.x, XAxis::Iteration) { k as f64 } else { wall }, v))
                        .collect();
                    Series::new(s.series.clone(), pts)
                })
                .collect(),
        };
        let (x_label, x_scale) = match chart.x {
            XAxis::Iteration => ("iteration k", Scale::Linear),
            XAxis::Seconds => ("wall seconds", Scale::Linear),
            XAxis::Param => ("dimension n", Scale::Log),
        };
        let axes = Axes { title: chart.title.into(), x_label: x_label.into(), y_label: chart.metric.name().into(), x_scale, y_scale: chart.y_scale };
        warnings.extend(emit_svg(&series, &axes, &dir.join(chart.file))?);
    }

    let report = StudyReport { dir: dir.clone(), runs, warnings };
    let summary = json!({
        "study": study.name(),
        "seed": opts.seed,
        "runs": report.runs.iter().map(|(s, r)| json!({
            "series": s.series,
            "directory": r.dir.strip_prefix(&dir).unwrap_or(&r.dir).display().to_string(),
            "status": r.status.label(),
            "expected_error": s.expect_error,
            "iterations": r.summary["iterations"],
            "wall_seconds": r.summary["wall_seconds"],
            "final_metrics": r.summary["final_metrics"],
            "extras": r.summary.get("extras").cloned().unwrap_or(serde_json::Value::Null),
        })).collect::<Vec<_>>(),
        "warnings": report.warnings,
        "unexpected_errors": report.unexpected_errors(),
        "library_version": blo_core::VERSION,
    });
    let path = dir.join("study.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("json") + "\n").map_err(io_err(&path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_names_round_trip() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        let err = "figure-9".parse::<Study>().unwrap_err();
        assert!(err.contains("counterexample") && err.contains("hypercleaning"));
    }

    #[test]
    fn ll_accuracy_covers_every_accuracy_level() {
        let runs = study_runs(Study::LlAccuracy, &StudyOptions::default());
        let labels: Vec<&str> = runs.iter().map(|r| r.series.as_str()).collect();
        assert_eq!(
            labels,
            [
                "rhg T=1",
                "rhg T=10",
                "rhg T=100",
                "implicit-cg eps=1e-1",
                "implicit-cg eps=1e-4",
                "implicit-cg eps=1e-8",
                "implicit-ns M=1",
                "implicit-ns M=10",
                "implicit-ns M=100",
                "bagdc"
            ]
        );
        for r in &runs {
            r.config.validate().unwrap();
        }
    }

    #[test]
    fn every_study_config_validates() {
        for s in Study::ALL {
            for r in study_runs(s, &StudyOptions::default()) {
                r.config.validate().unwrap_or_else(|e| panic!("{s} {}: {e}", r.series));
            }
        }
    }

    #[test]
    fn idx_paths_switch_the_hypercleaning_source() {
        let opts = StudyOptions {
            idx: Some(IdxPaths { train_images: "img".into(), train_labels: "lab".into(), val: None }),
            ..Default::default()
        };
        let runs = study_runs(Study::Hypercleaning, &opts);
        let ProblemSpec::Hypercleaning(h) = &runs[0].config.problem else { panic!() };
        assert!(h.uses_files());
        assert_eq!(h.split_sizes(), (5000, 5000));
        assert_eq!(runs[0].config.schedule.beta, None);
    }
}
