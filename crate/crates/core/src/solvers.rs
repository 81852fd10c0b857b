//! Step-size schedules, single-step transitions, and the run driver.
//!
//! [`bagdc_step`] is the dual-corrected alternating gradient method. It keeps
//! an explicit multiplier `v` that tracks `[∇²_yy ψ_μ]⁻¹ ∇_y F` with one
//! Hessian-vector product per iteration instead of solving for it. The
//! hypergradient baselines compute a descent direction `d` for `x` from an
//! inner loop on `y`; [`run_solver`] then takes `x ← x − α·d` and warm-starts
//! the next inner loop from the returned `y`.

use std::time::Instant;

use thiserror::Error;

use crate::metrics::{kkt_residual, oracle_metrics, AnalyticOracle, Iterate, TraceRecord, TraceSink};
use crate::problem::{aggregate, AggregatedProblem, BilevelProblem, OracleCounts, ProblemError};
use crate::vecmat::{cg_solve, neumann_apply, power_iteration_lmax, LinalgError, LinearOperator, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("iterate {variable} became non-finite at iteration {iteration}")]
    Diverged { variable: &'static str, iteration: u64 },
    #[error("lower-level Hessian is singular or indefinite at iteration {iteration}: {detail}")]
    SingularHessian { iteration: u64, detail: String },
    #[error(transparent)]
    Capability(#[from] ProblemError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("trace sink failed: {0}")]
    Sink(String),
}

/// Regime of the lower-level objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// `f` strongly convex in `y`: `μ_k ≡ 0` and constant steps.
    StronglyConvex,
    /// `f` merely convex: aggregation with a vanishing `μ_k`.
    MerelyConvex,
}

/// How the multiplier step `η_k` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EtaRule {
    Fixed,
    /// `η = ⟨r, r⟩ / ⟨r, H r⟩`, the exact minimizer of the residual model
    /// along `r`, with the scheduled value as fallback. Costs one extra HVP.
    Adaptive,
}

/// Step-size schedule.
///
/// Merely-convex mode uses `μ_k = μ̄(k+1)^{−p}`, `α_k = ᾱμ_k¹¹`, `β_k = β̄`,
/// `η_k = η̄μ_k⁴` with `0 < p < 1/11` and `0 < μ̄ ≤ 1/2`. Strongly-convex mode
/// uses `(0, ᾱ, β̄, η̄)` at every iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub mode: Mode,
    pub mu_bar: f64,
    pub p: f64,
    pub lambda: f64,
    pub alpha_bar: f64,
    pub beta_bar: f64,
    pub eta_bar: f64,
    pub eta_rule: EtaRule,
}

/// Step sizes of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl ScheduleConfig {
    pub const DEFAULT_P: f64 = 1.0 / 12.0;
    pub const DEFAULT_MU_BAR: f64 = 0.5;
    pub const DEFAULT_LAMBDA: f64 = 1.0;

    pub fn strongly_convex(alpha_bar: f64, beta_bar: f64, eta_bar: f64) -> Self {
        ScheduleConfig {
            mode: Mode::StronglyConvex,
            mu_bar: 0.0,
            p: Self::DEFAULT_P,
            lambda: Self::DEFAULT_LAMBDA,
            alpha_bar,
            beta_bar,
            eta_bar,
            eta_rule: EtaRule::Fixed,
        }
    }

    pub fn merely_convex(alpha_bar: f64, beta_bar: f64, eta_bar: f64) -> Self {
        ScheduleConfig {
            mode: Mode::MerelyConvex,
            mu_bar: Self::DEFAULT_MU_BAR,
            ..Self::strongly_convex(alpha_bar, beta_bar, eta_bar)
        }
    }

    /// Defaults from a curvature estimate `L̂` of `∇²_yy f`:
    /// `β̄ = η̄ = 1/L̂`, `ᾱ = 0.1/L̂`.
    pub fn from_lipschitz(mode: Mode, l_hat: f64) -> Self {
        let base = Self::strongly_convex(0.1 / l_hat, 1.0 / l_hat, 1.0 / l_hat);
        match mode {
            Mode::StronglyConvex => base,
            Mode::MerelyConvex => ScheduleConfig { mode, mu_bar: Self::DEFAULT_MU_BAR, ..base },
        }
    }

    pub fn with_eta_rule(mut self, rule: EtaRule) -> Self {
        self.eta_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SolverError::InvalidSchedule(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("alpha_bar", self.alpha_bar)?;
        positive("beta_bar", self.beta_bar)?;
        positive("eta_bar", self.eta_bar)?;
        positive("lambda", self.lambda)?;
        if self.mode == Mode::MerelyConvex {
            if !(self.p > 0.0 && self.p < 1.0 / 11.0) {
                return Err(SolverError::InvalidSchedule(format!("merely-convex mode needs 0 < p < 1/11, got {}", self.p)));
            }
            if !(self.mu_bar > 0.0 && self.mu_bar <= 0.5) {
                return Err(SolverError::InvalidSchedule(format!("merely-convex mode needs 0 < mu_bar <= 1/2, got {}", self.mu_bar)));
            }
        }
        Ok(())
    }

    /// Step sizes at iteration `k`.
    pub fn at(&self, k: u64) -> StepSizes {
        match self.mode {
            Mode::StronglyConvex => StepSizes { mu: 0.0, alpha: self.alpha_bar, beta: self.beta_bar, eta: self.eta_bar },
            Mode::MerelyConvex => {
                let mu = self.mu_bar * (k as f64 + 1.0).powf(-self.p);
                StepSizes {
                    mu,
                    alpha: self.alpha_bar * mu.powi(11),
                    beta: self.beta_bar,
                    eta: self.eta_bar * mu.powi(4),
                }
            }
        }
    }
}

/// Same as [`ScheduleConfig::at`].
pub fn schedule_at(cfg: &ScheduleConfig, k: u64) -> StepSizes {
    cfg.at(k)
}

/// Power-iteration estimate of the largest eigenvalue of `∇²_yy f(x, y)`.
pub fn estimate_lipschitz(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], iters: usize, seed: u64) -> f64 {
    let f = AggregatedProblem::lower_only(problem);
    power_iteration_lmax(&f.hessian_yy(x, y), iters, seed)
}

/// Iterates of the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub x: Vector,
    pub y: Vector,
    /// Dual multiplier of the constraint `∇_y f(x, y) = 0`.
    pub v: Vector,
    pub k: u64,
    /// Solver wall-clock seconds spent so far.
    pub elapsed: f64,
}

impl SolverState {
    pub fn new(x: Vector, y: Vector, v: Vector) -> Self {
        SolverState { x, y, v, k: 0, elapsed: 0.0 }
    }

    /// All-zero iterate sized for `problem`.
    pub fn zeros(problem: &dyn BilevelProblem) -> Self {
        let (n, m) = (problem.ul_dim(), problem.ll_dim());
        Self::new(Vector::zeros(n), Vector::zeros(m), Vector::zeros(m))
    }

    pub fn check_dims(&self, problem: &dyn BilevelProblem) -> Result<(), SolverError> {
        let (n, m) = (problem.ul_dim(), problem.ll_dim());
        for (what, expected, found) in [("x", n, self.x.dim()), ("y", m, self.y.dim()), ("v", m, self.v.dim())] {
            if expected != found {
                return Err(SolverError::DimensionMismatch { what, expected, found });
            }
        }
        Ok(())
    }
}

/// Outcome of one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: SolverState,
    /// The direction `x` moved along: `x⁺ = x − α·d`.
    pub d: Vector,
    /// Largest norm among the update directions the method maintains:
    /// `d`, plus the `y` gradient and the `v` residual for single-loop methods.
    pub update_norm: f64,
    pub eta: f64,
    pub cost: OracleCounts,
}

fn finite(v: &Vector, variable: &'static str, iteration: u64) -> Result<(), SolverError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SolverError::Diverged { variable, iteration })
    }
}

fn next_state(prev: &SolverState, x: Vector, y: Vector, v: Vector) -> SolverState {
    SolverState { x, y, v, k: prev.k + 1, elapsed: prev.elapsed }
}

/// Curvature ratio below which [`adaptive_eta`] falls back.
const ADAPTIVE_FLOOR: f64 = 1e-12;

fn adaptive_eta_from_residual(psi: &AggregatedProblem<'_>, x: &[f64], y: &[f64], r: &Vector, fallback: f64) -> (f64, u64) {
    let rr = r.norm_sq();
    if rr == 0.0 {
        return (fallback, 0);
    }
    let rhr = r.dot(&psi.hvp_yy(x, y, r));
    if !(rhr > ADAPTIVE_FLOOR * rr) {
        return (fallback, 1);
    }
    (rr / rhr, 1)
}

/// Residual-minimizing multiplier step at `(x, y_next, v)`.
///
/// With `r = ∇_yF − ∇²_yyψ·v` and `H = ∇²_yyψ`, returns `⟨r, r⟩/⟨r, Hr⟩`, or
/// `fallback` when `r = 0` or `⟨r, Hr⟩ ≤ 10⁻¹²⟨r, r⟩`.
pub fn adaptive_eta(psi: &AggregatedProblem<'_>, x: &[f64], y_next: &[f64], v: &[f64], fallback: f64) -> f64 {
    let r = psi.base().grad_y_ul(x, y_next).sub(&psi.hvp_yy(x, y_next, v));
    adaptive_eta_from_residual(psi, x, y_next, &r, fallback).0
}

/// One dual-corrected step, in order:
///
/// ```text
/// y⁺ = y − β∇_yψ_μ(x, y)
/// v⁺ = v + η(∇_yF(x, y⁺) − ∇²_yyψ_μ(x, y⁺)·v)
/// x⁺ = x − α(∇_xF(x, y⁺) − ∇²_xyψ_μ(x, y)·v⁺)
/// ```
pub fn bagdc_step(
    state: &SolverState,
    problem: &dyn BilevelProblem,
    steps: StepSizes,
    lambda: f64,
    eta_rule: EtaRule,
) -> Result<StepResult, SolverError> {
    let psi = aggregate(problem, steps.mu, lambda)?;
    let (x, y, v) = (&state.x, &state.y, &state.v);
    let mut cost = OracleCounts::default();

    let gy = psi.grad_y(x, y);
    let mut y_next = y.clone();
    y_next.axpy(-steps.beta, &gy);
    cost.gradients += 1;
    finite(&y_next, "y", state.k)?;

    let mut r = problem.grad_y_ul(x, &y_next);
    r.axpy(-1.0, &psi.hvp_yy(x, &y_next, v));
    cost.gradients += 1;
    cost.hvps += 1;
    let eta = match eta_rule {
        EtaRule::Fixed => steps.eta,
        EtaRule::Adaptive => {
            let (eta, hvps) = adaptive_eta_from_residual(&psi, x, &y_next, &r, steps.eta);
            cost.hvps += hvps;
            eta
        }
    };
    let mut v_next = v.clone();
    v_next.axpy(eta, &r);
    finite(&v_next, "v", state.k)?;

    let mut d = problem.grad_x_ul(x, &y_next);
    d.axpy(-1.0, &psi.jvp_xy(x, y, &v_next));
    cost.gradients += 1;
    cost.jvps += 1;
    let mut x_next = x.clone();
    x_next.axpy(-steps.alpha, &d);
    finite(&x_next, "x", state.k)?;

    let update_norm = d.norm().max(gy.norm()).max(r.norm());
    Ok(StepResult { state: next_state(state, x_next, y_next, v_next), d, update_norm, eta, cost })
}

/// Naive one-step acceleration:
///
/// ```text
/// y⁺ = y − β∇_y f(x, y)
/// x⁺ = x − α(∇_xF(x, y⁺) − β·∇²_xy f(x, y)·∇_yF(x, y⁺))
/// ```
///
/// The implied multiplier `β∇_yF(x, y⁺)` is stored in `v`.
pub fn nosa_step(state: &SolverState, problem: &dyn BilevelProblem, alpha: f64, beta: f64) -> Result<StepResult, SolverError> {
    let (x, y) = (&state.x, &state.y);
    let gy = problem.grad_y_ll(x, y);
    let mut y_next = y.clone();
    y_next.axpy(-beta, &gy);
    finite(&y_next, "y", state.k)?;
    let v_next = problem.grad_y_ul(x, &y_next).scaled(beta);
    let mut d = problem.grad_x_ul(x, &y_next);
    d.axpy(-1.0, &problem.jvp_xy_ll(x, y, &v_next));
    let mut x_next = x.clone();
    x_next.axpy(-alpha, &d);
    finite(&x_next, "x", state.k)?;
    let cost = OracleCounts { gradients: 3, hvps: 0, jvps: 1 };
    let update_norm = d.norm().max(gy.norm());
    Ok(StepResult { state: next_state(state, x_next, y_next, v_next), d, update_norm, eta: 0.0, cost })
}

/// Output of a hypergradient baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct HypergradientResult {
    /// Descent direction for `x`.
    pub d: Vector,
    /// Final inner iterate, used to warm-start the next call.
    pub y_out: Vector,
    /// Multiplier implied by the method, so that `d = ∇_xF − ∇²_xy f·v`.
    pub multiplier: Vector,
    pub inner_cost: OracleCounts,
}

fn inner_descent(psi: &AggregatedProblem<'_>, x: &[f64], y0: &[f64], t: usize, beta: f64, iteration: u64) -> Result<Vec<Vector>, SolverError> {
    let mut traj = Vec::with_capacity(t + 1);
    traj.push(Vector::from_slice(y0));
    for _ in 0..t {
        let y = traj.last().expect("trajectory starts non-empty");
        let mut next = y.clone();
        next.axpy(-beta, &psi.grad_y(x, y));
        finite(&next, "y", iteration)?;
        traj.push(next);
    }
    Ok(traj)
}

fn reverse_mode(
    psi: &AggregatedProblem<'_>,
    x: &[f64],
    y0: &[f64],
    t: usize,
    beta: f64,
    iteration: u64,
) -> Result<HypergradientResult, SolverError> {
    if t == 0 {
        return Err(SolverError::InvalidArgument("reverse-mode unrolling needs T >= 1".into()));
    }
    let base = psi.base();
    let traj = inner_descent(psi, x, y0, t, beta, iteration)?;
    let y_t = &traj[t];
    let mut a = base.grad_y_ul(x, y_t);
    let mut d = base.grad_x_ul(x, y_t);
    let mut multiplier = Vector::zeros(a.dim());
    for y_s in traj[..t].iter().rev() {
        d.axpy(-beta, &psi.jvp_xy(x, y_s, &a));
        multiplier.axpy(beta, &a);
        let ha = psi.hvp_yy(x, y_s, &a);
        a.axpy(-beta, &ha);
    }
    finite(&d, "d", iteration)?;
    let inner_cost = OracleCounts { gradients: t as u64 + 2, hvps: t as u64, jvps: t as u64 };
    Ok(HypergradientResult { d, y_out: traj[t].clone(), multiplier, inner_cost })
}

/// Reverse-mode hypergradient through `T` unrolled gradient steps on `f`.
pub fn rhg_hypergradient(problem: &dyn BilevelProblem, x: &[f64], y0: &[f64], t: usize, beta: f64) -> Result<HypergradientResult, SolverError> {
    reverse_mode(&AggregatedProblem::lower_only(problem), x, y0, t, beta, 0)
}

/// Reverse-mode hypergradient through `T` unrolled gradient steps on `ψ_μ`.
pub fn bda_hypergradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y0: &[f64],
    t: usize,
    mu: f64,
    lambda: f64,
    beta: f64,
) -> Result<HypergradientResult, SolverError> {
    let psi = aggregate(problem, mu, lambda)?;
    reverse_mode(&psi, x, y0, t, beta, 0)
}

fn implicit_direction(
    problem: &dyn BilevelProblem,
    x: &[f64],
    t: usize,
    traj_end: Vector,
    v: Vector,
    hvps: u64,
    iteration: u64,
) -> Result<HypergradientResult, SolverError> {
    finite(&v, "v", iteration)?;
    let mut d = problem.grad_x_ul(x, &traj_end);
    d.axpy(-1.0, &problem.jvp_xy_ll(x, &traj_end, &v));
    finite(&d, "d", iteration)?;
    let inner_cost = OracleCounts { gradients: t as u64 + 2, hvps, jvps: 1 };
    Ok(HypergradientResult { d, y_out: traj_end, multiplier: v, inner_cost })
}

fn cg_max_iter(m: usize) -> usize {
    10 * m + 100
}

/// Implicit differentiation after `T` inner steps, with `v` from CG to
/// relative tolerance `ε`.
pub fn implicit_cg_hypergradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y0: &[f64],
    t: usize,
    beta: f64,
    eps: f64,
) -> Result<HypergradientResult, SolverError> {
    implicit_cg_at(problem, x, y0, t, beta, eps, 0)
}

fn implicit_cg_at(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y0: &[f64],
    t: usize,
    beta: f64,
    eps: f64,
    iteration: u64,
) -> Result<HypergradientResult, SolverError> {
    let f = AggregatedProblem::lower_only(problem);
    let y_hat = inner_descent(&f, x, y0, t, beta, iteration)?.pop().expect("non-empty trajectory");
    let b = problem.grad_y_ul(x, &y_hat);
    let h = f.hessian_yy(x, &y_hat);
    let v = match cg_solve(&h, &b, eps, cg_max_iter(h.dim())) {
        Ok(sol) => sol.x,
        Err(LinalgError::NotPositiveDefinite { iteration: cg_it, curvature }) => {
            return Err(SolverError::SingularHessian {
                iteration,
                detail: format!("CG met curvature {curvature:e} at CG iteration {cg_it}"),
            })
        }
        Err(LinalgError::NonFinite { .. }) => return Err(SolverError::Diverged { variable: "v", iteration }),
        Err(e) => return Err(SolverError::InvalidArgument(e.to_string())),
    };
    let hvps = h.applications();
    implicit_direction(problem, x, t, y_hat, v, hvps, iteration)
}

/// Implicit differentiation after `T` inner steps, with `v` from an
/// `M`-term Neumann series of step `β`.
pub fn implicit_ns_hypergradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y0: &[f64],
    t: usize,
    beta: f64,
    m: usize,
) -> Result<HypergradientResult, SolverError> {
    implicit_ns_at(problem, x, y0, t, beta, m, 0)
}

fn implicit_ns_at(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y0: &[f64],
    t: usize,
    beta: f64,
    m: usize,
    iteration: u64,
) -> Result<HypergradientResult, SolverError> {
    let f = AggregatedProblem::lower_only(problem);
    let y_hat = inner_descent(&f, x, y0, t, beta, iteration)?.pop().expect("non-empty trajectory");
    let b = problem.grad_y_ul(x, &y_hat);
    let h = f.hessian_yy(x, &y_hat);
    let v = match neumann_apply(&h, &b, beta, m) {
        Ok(v) => v,
        Err(LinalgError::NonFinite { .. }) => return Err(SolverError::Diverged { variable: "v", iteration }),
        Err(e) => return Err(SolverError::InvalidArgument(e.to_string())),
    };
    let hvps = h.applications();
    implicit_direction(problem, x, t, y_hat, v, hvps, iteration)
}

/// Solver selection with per-method parameters.
///
/// Inner step sizes `β` (and the Neumann step) come from the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Bagdc,
    Nosa,
    Rhg { t: usize },
    ImplicitCg { t: usize, eps: f64 },
    ImplicitNs { t: usize, m: usize },
    Bda { t: usize, mu: f64, lambda: f64 },
}

impl Method {
    pub const NAMES: [&'static str; 6] = ["bagdc", "nosa", "rhg", "implicit-cg", "implicit-ns", "bda"];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bagdc => "bagdc",
            Method::Nosa => "nosa",
            Method::Rhg { .. } => "rhg",
            Method::ImplicitCg { .. } => "implicit-cg",
            Method::ImplicitNs { .. } => "implicit-ns",
            Method::Bda { .. } => "bda",
        }
    }
}

/// Termination rules; the first one met stops the run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StopCriteria {
    pub max_iters: Option<u64>,
    /// Limit on solver wall time (metric evaluation excluded).
    pub max_seconds: Option<f64>,
    /// Stop once every update direction falls to this value (see
    /// [`StepResult::update_norm`]); `‖d‖` alone can pass through zero while
    /// the iterates still spiral towards the solution.
    pub d_norm_tol: Option<f64>,
    /// Stop once the KKT residual falls to this value (checked on traced iterations).
    pub kkt_tol: Option<f64>,
}

impl StopCriteria {
    pub fn is_set(&self) -> bool {
        self.max_iters.is_some() || self.max_seconds.is_some() || self.d_norm_tol.is_some() || self.kkt_tol.is_some()
    }
}

/// Time source for trace timestamps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    Monotonic,
    /// Always reports zero elapsed time, making traces byte-reproducible.
    Frozen,
}

/// Driver options that do not affect the iterates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub clock: Clock,
    /// Record every `trace_every`-th iteration (and the last one).
    pub trace_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { clock: Clock::Monotonic, trace_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    /// A tolerance was met; names the criterion (`d_norm` or `kkt`).
    Converged { criterion: &'static str },
    MaxIters,
    TimeLimit,
    Diverged { at_iteration: u64, variable: &'static str },
    Failed { at_iteration: u64, message: String },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Converged { .. } => "converged",
            RunStatus::MaxIters => "max_iters",
            RunStatus::TimeLimit => "time_limit",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Failed { .. } => "failed",
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. } | RunStatus::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: &'static str,
    pub status: RunStatus,
    pub iterations: u64,
    pub wall_seconds: f64,
    pub final_record: Option<TraceRecord>,
    pub total_cost: OracleCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub state: SolverState,
    pub summary: RunSummary,
}

fn failure_status(err: SolverError, k: u64) -> RunStatus {
    match err {
        SolverError::Diverged { variable, iteration } => RunStatus::Diverged { at_iteration: iteration, variable },
        other => RunStatus::Failed { at_iteration: k, message: other.to_string() },
    }
}

fn hypergradient_step(
    state: &SolverState,
    problem: &dyn BilevelProblem,
    method: &Method,
    steps: StepSizes,
) -> Result<StepResult, SolverError> {
    let (x, y, k) = (&state.x, &state.y, state.k);
    let h = match *method {
        Method::Rhg { t } => reverse_mode(&AggregatedProblem::lower_only(problem), x, y, t, steps.beta, k)?,
        Method::Bda { t, mu, lambda } => reverse_mode(&aggregate(problem, mu, lambda)?, x, y, t, steps.beta, k)?,
        Method::ImplicitCg { t, eps } => implicit_cg_at(problem, x, y, t, steps.beta, eps, k)?,
        Method::ImplicitNs { t, m } => implicit_ns_at(problem, x, y, t, steps.beta, m, k)?,
        Method::Bagdc | Method::Nosa => unreachable!("single-step methods are handled by the driver"),
    };
    let mut x_next = x.clone();
    x_next.axpy(-steps.alpha, &h.d);
    finite(&x_next, "x", k)?;
    let update_norm = h.d.norm();
    Ok(StepResult { state: next_state(state, x_next, h.y_out, h.multiplier), d: h.d, update_norm, eta: 0.0, cost: h.inner_cost })
}

/// One outer iteration of `method` from `state`.
pub fn solver_step(
    state: &SolverState,
    problem: &dyn BilevelProblem,
    method: &Method,
    schedule: &ScheduleConfig,
) -> Result<StepResult, SolverError> {
    let steps = schedule.at(state.k);
    match method {
        Method::Bagdc => bagdc_step(state, problem, steps, schedule.lambda, schedule.eta_rule),
        Method::Nosa => nosa_step(state, problem, steps.alpha, steps.beta),
        _ => hypergradient_step(state, problem, method, steps),
    }
}

struct Timer {
    clock: Clock,
    start: Option<Instant>,
}

impl Timer {
    fn start(clock: Clock) -> Self {
        Timer { clock, start: (clock == Clock::Monotonic).then(Instant::now) }
    }

    fn seconds(&self) -> f64 {
        match (self.clock, self.start) {
            (Clock::Monotonic, Some(t)) => t.elapsed().as_secs_f64(),
            _ => 0.0,
        }
    }
}

/// Runs `method` until a stop criterion fires or a step fails.
///
/// Each outer iteration `k` uses `schedule.at(k)` and emits one
/// [`TraceRecord`] (subject to `options.trace_every`) evaluated at the new
/// iterate. Oracle-only columns are filled when `oracle` is given. Only the
/// solver steps are timed. Errors end the run and are reported in the
/// summary status together with the iteration index.
#[allow(clippy::too_many_arguments)]
pub fn run_solver(
    problem: &dyn BilevelProblem,
    method: &Method,
    schedule: &ScheduleConfig,
    stop: &StopCriteria,
    init: Option<SolverState>,
    oracle: Option<&dyn AnalyticOracle>,
    sink: &mut dyn TraceSink,
    options: RunOptions,
) -> RunOutcome {
    let mut state = init.unwrap_or_else(|| SolverState::zeros(problem));
    let start_k = state.k;
    let mut summary = RunSummary {
        method: method.name(),
        status: RunStatus::MaxIters,
        iterations: 0,
        wall_seconds: state.elapsed,
        final_record: None,
        total_cost: OracleCounts::default(),
    };
    let precheck = state
        .check_dims(problem)
        .and_then(|_| schedule.validate())
        .and_then(|_| if stop.is_set() { Ok(()) } else { Err(SolverError::InvalidArgument("no stop criterion set".into())) });
    if let Err(e) = precheck {
        summary.status = failure_status(e, start_k);
        return RunOutcome { state, summary };
    }
    let every = options.trace_every.max(1);

    loop {
        let done = state.k - start_k;
        if stop.max_iters.is_some_and(|m| done >= m) {
            summary.status = RunStatus::MaxIters;
            break;
        }
        if stop.max_seconds.is_some_and(|s| state.elapsed >= s) {
            summary.status = RunStatus::TimeLimit;
            break;
        }
        let k = state.k;
        let steps = schedule.at(k);
        let timer = Timer::start(options.clock);
        let step = solver_step(&state, problem, method, schedule);
        let spent = timer.seconds();
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                state.elapsed += spent;
                summary.status = failure_status(e, k);
                break;
            }
        };
        let d_norm = step.d.norm();
        let update_norm = step.update_norm;
        state = step.state;
        state.elapsed += spent;
        summary.iterations += 1;
        summary.total_cost.gradients += step.cost.gradients;
        summary.total_cost.hvps += step.cost.hvps;
        summary.total_cost.jvps += step.cost.jvps;

        let d_converged = stop.d_norm_tol.is_some_and(|tol| update_norm <= tol);
        let next_done = state.k - start_k;
        let last = d_converged
            || stop.max_iters.is_some_and(|m| next_done >= m)
            || stop.max_seconds.is_some_and(|s| state.elapsed >= s);
        if done % every == 0 || last {
            let record = make_record(problem, oracle, &state, k, d_norm, steps, step.eta, schedule.lambda, step.cost);
            summary.final_record = Some(record);
            let iterate = Iterate { x: &state.x, y: &state.y, v: &state.v };
            if let Err(e) = sink.record(&record, iterate) {
                summary.status = failure_status(SolverError::Sink(e.to_string()), k);
                break;
            }
            if stop.kkt_tol.is_some_and(|tol| record.kkt_residual <= tol) {
                summary.status = RunStatus::Converged { criterion: "kkt" };
                break;
            }
        }
        if d_converged {
            summary.status = RunStatus::Converged { criterion: "d_norm" };
            break;
        }
    }
    summary.wall_seconds = state.elapsed;
    RunOutcome { state, summary }
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    problem: &dyn BilevelProblem,
    oracle: Option<&dyn AnalyticOracle>,
    state: &SolverState,
    k: u64,
    d_norm: f64,
    steps: StepSizes,
    eta_used: f64,
    lambda: f64,
    cost: OracleCounts,
) -> TraceRecord {
    let (x, y, v) = (&state.x, &state.y, &state.v);
    let om = oracle_metrics(problem, oracle, x, y, v, steps.mu, lambda);
    TraceRecord {
        k,
        wall_seconds: state.elapsed,
        ul_value: problem.ul_value(x, y),
        ll_value: problem.ll_value(x, y),
        d_norm,
        kkt_residual: kkt_residual(problem, x, y, v),
        grad_phi_norm: om.grad_phi_norm,
        dist_x_rel: om.dist_x_rel,
        dist_y: om.dist_y,
        lyapunov: om.lyapunov,
        mu: steps.mu,
        alpha: steps.alpha,
        beta: steps.beta,
        eta: if eta_used != 0.0 { eta_used } else { steps.eta },
        hvp_count: cost.hvps,
        jvp_count: cost.jvps,
    }
}
