//! The bilevel oracle interface and the aggregation wrapper.
//!
//! A problem supplies values, gradients and second-order vector products of
//! the upper-level objective `F(x, y)` and the lower-level objective `f(x, y)`.
//! Both objectives are assumed smooth with Lipschitz first and second
//! derivatives; that is a caller obligation and is not checked here.
//! [`fd_check_gradients`] is the tool for validating hand-written derivatives.
//!
//! Conventions: `x ∈ Rⁿ`, `y ∈ Rᵐ`. The mixed product `jvp_xy_*` maps
//! `u ∈ Rᵐ` to `∇²_xy·u ∈ Rⁿ`; the transpose direction is never needed.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::vecmat::{dot, gaussian_vector, LinearOperator, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("aggregation with mu = {mu} needs upper-level second-order products, which this problem does not provide")]
    MissingCapability { mu: f64 },
    #[error("aggregation parameter mu = {0} outside [0, 1/2]")]
    InvalidMu(f64),
    #[error("aggregation weight lambda = {0} must be positive")]
    InvalidLambda(f64),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
}

/// Second-order products of the upper-level objective.
///
/// Only needed when the lower level is aggregated with `μ > 0`.
pub trait UpperSecondOrder: Sync {
    /// `∇²_yy F(x, y)·u ∈ Rᵐ`
    fn hvp_yy_ul(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector;
    /// `∇²_xy F(x, y)·u ∈ Rⁿ`
    fn jvp_xy_ul(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector;
}

/// Oracle access to a bilevel problem.
///
/// All evaluations must be finite on finite inputs and re-entrant.
/// `hvp_yy_ll` must be symmetric in `u`.
pub trait BilevelProblem: Sync {
    /// Upper-level dimension `n`.
    fn ul_dim(&self) -> usize;
    /// Lower-level dimension `m`.
    fn ll_dim(&self) -> usize;

    fn ul_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn ll_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x_ul(&self, x: &[f64], y: &[f64]) -> Vector;
    fn grad_y_ul(&self, x: &[f64], y: &[f64]) -> Vector;
    fn grad_y_ll(&self, x: &[f64], y: &[f64]) -> Vector;
    /// `∇²_yy f(x, y)·u ∈ Rᵐ`
    fn hvp_yy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector;
    /// `∇²_xy f(x, y)·u ∈ Rⁿ`
    fn jvp_xy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector;

    /// Upper-level second-order products, when the problem provides them.
    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        None
    }
}

impl<P: BilevelProblem + ?Sized> BilevelProblem for &P {
    fn ul_dim(&self) -> usize {
        (**self).ul_dim()
    }
    fn ll_dim(&self) -> usize {
        (**self).ll_dim()
    }
    fn ul_value(&self, x: &[f64], y: &[f64]) -> f64 {
        (**self).ul_value(x, y)
    }
    fn ll_value(&self, x: &[f64], y: &[f64]) -> f64 {
        (**self).ll_value(x, y)
    }
    fn grad_x_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        (**self).grad_x_ul(x, y)
    }
    fn grad_y_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        (**self).grad_y_ul(x, y)
    }
    fn grad_y_ll(&self, x: &[f64], y: &[f64]) -> Vector {
        (**self).grad_y_ll(x, y)
    }
    fn hvp_yy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        (**self).hvp_yy_ll(x, y, u)
    }
    fn jvp_xy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        (**self).jvp_xy_ll(x, y, u)
    }
    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        (**self).ul_second_order()
    }
}

/// `ψ_μ(x, y) = μλ·F(x, y) + (1 − μ)·f(x, y)` over a base problem.
///
/// With `μ = 0` this is exactly `f`, and the upper-level second-order
/// products are never touched.
#[derive(Clone, Copy)]
pub struct AggregatedProblem<'a> {
    base: &'a dyn BilevelProblem,
    upper: Option<&'a dyn UpperSecondOrder>,
    mu: f64,
    lambda: f64,
}

/// Builds `ψ_μ` over `base`.
///
/// Requires `0 ≤ μ ≤ 1/2` and `λ > 0`; `μ > 0` additionally requires
/// upper-level second-order products.
pub fn aggregate(base: &dyn BilevelProblem, mu: f64, lambda: f64) -> Result<AggregatedProblem<'_>, ProblemError> {
    if !(0.0..=0.5).contains(&mu) {
        return Err(ProblemError::InvalidMu(mu));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(ProblemError::InvalidLambda(lambda));
    }
    let upper = base.ul_second_order();
    if mu > 0.0 && upper.is_none() {
        return Err(ProblemError::MissingCapability { mu });
    }
    Ok(AggregatedProblem { base, upper, mu, lambda })
}

impl<'a> AggregatedProblem<'a> {
    /// `ψ_0 = f`, which never touches upper-level second-order products.
    pub fn lower_only(base: &'a dyn BilevelProblem) -> Self {
        AggregatedProblem { base, upper: None, mu: 0.0, lambda: 1.0 }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn base(&self) -> &'a dyn BilevelProblem {
        self.base
    }

    fn ul_weight(&self) -> f64 {
        self.mu * self.lambda
    }

    fn ll_weight(&self) -> f64 {
        1.0 - self.mu
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let f = self.base.ll_value(x, y);
        if self.mu == 0.0 {
            return f;
        }
        self.ul_weight() * self.base.ul_value(x, y) + self.ll_weight() * f
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vector {
        let gf = self.base.grad_y_ll(x, y);
        if self.mu == 0.0 {
            return gf;
        }
        let mut g = self.base.grad_y_ul(x, y).scaled(self.ul_weight());
        g.axpy(self.ll_weight(), &gf);
        g
    }

    pub fn hvp_yy(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        let hf = self.base.hvp_yy_ll(x, y, u);
        match self.upper {
            Some(upper) if self.mu > 0.0 => {
                let mut h = upper.hvp_yy_ul(x, y, u).scaled(self.ul_weight());
                h.axpy(self.ll_weight(), &hf);
                h
            }
            _ => hf,
        }
    }

    pub fn jvp_xy(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        let jf = self.base.jvp_xy_ll(x, y, u);
        match self.upper {
            Some(upper) if self.mu > 0.0 => {
                let mut j = upper.jvp_xy_ul(x, y, u).scaled(self.ul_weight());
                j.axpy(self.ll_weight(), &jf);
                j
            }
            _ => jf,
        }
    }

    /// `∇²_yy ψ_μ(x, y)` as a matrix-free operator.
    pub fn hessian_yy<'s>(&'s self, x: &'s [f64], y: &'s [f64]) -> HessianOperator<'s> {
        HessianOperator { psi: self, x, y, applications: AtomicU64::new(0) }
    }
}

/// `∇²_yy ψ_μ(x, y)` at a fixed point, counting its applications.
pub struct HessianOperator<'a> {
    psi: &'a AggregatedProblem<'a>,
    x: &'a [f64],
    y: &'a [f64],
    applications: AtomicU64,
}

impl HessianOperator<'_> {
    pub fn applications(&self) -> u64 {
        self.applications.load(Ordering::Relaxed)
    }
}

impl LinearOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.psi.base.ll_dim()
    }
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        self.applications.fetch_add(1, Ordering::Relaxed);
        out.copy_from_slice(&self.psi.hvp_yy(self.x, self.y, u));
    }
}

/// Oracle call counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OracleCounts {
    pub gradients: u64,
    pub hvps: u64,
    pub jvps: u64,
}

/// Wraps a problem and counts every gradient, HVP and JVP call.
///
/// Upper- and lower-level products are counted together.
pub struct CountingProblem<P> {
    inner: P,
    gradients: AtomicU64,
    hvps: AtomicU64,
    jvps: AtomicU64,
}

impl<P: BilevelProblem> CountingProblem<P> {
    pub fn new(inner: P) -> Self {
        CountingProblem { inner, gradients: AtomicU64::new(0), hvps: AtomicU64::new(0), jvps: AtomicU64::new(0) }
    }

    pub fn counts(&self) -> OracleCounts {
        OracleCounts {
            gradients: self.gradients.load(Ordering::Relaxed),
            hvps: self.hvps.load(Ordering::Relaxed),
            jvps: self.jvps.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.gradients.store(0, Ordering::Relaxed);
        self.hvps.store(0, Ordering::Relaxed);
        self.jvps.store(0, Ordering::Relaxed);
    }

    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

impl<P: BilevelProblem> BilevelProblem for CountingProblem<P> {
    fn ul_dim(&self) -> usize {
        self.inner.ul_dim()
    }
    fn ll_dim(&self) -> usize {
        self.inner.ll_dim()
    }
    fn ul_value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.ul_value(x, y)
    }
    fn ll_value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.inner.ll_value(x, y)
    }
    fn grad_x_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        Self::bump(&self.gradients);
        self.inner.grad_x_ul(x, y)
    }
    fn grad_y_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        Self::bump(&self.gradients);
        self.inner.grad_y_ul(x, y)
    }
    fn grad_y_ll(&self, x: &[f64], y: &[f64]) -> Vector {
        Self::bump(&self.gradients);
        self.inner.grad_y_ll(x, y)
    }
    fn hvp_yy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        Self::bump(&self.hvps);
        self.inner.hvp_yy_ll(x, y, u)
    }
    fn jvp_xy_ll(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        Self::bump(&self.jvps);
        self.inner.jvp_xy_ll(x, y, u)
    }
    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        self.inner.ul_second_order().map(|_| self as &dyn UpperSecondOrder)
    }
}

impl<P: BilevelProblem> UpperSecondOrder for CountingProblem<P> {
    fn hvp_yy_ul(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        Self::bump(&self.hvps);
        self.inner.ul_second_order().expect("capability checked by caller").hvp_yy_ul(x, y, u)
    }
    fn jvp_xy_ul(&self, x: &[f64], y: &[f64], u: &[f64]) -> Vector {
        Self::bump(&self.jvps);
        self.inner.ul_second_order().expect("capability checked by caller").jvp_xy_ul(x, y, u)
    }
}

/// One row of a finite-difference report.
#[derive(Clone, Debug, PartialEq)]
pub struct FdCheck {
    pub name: &'static str,
    /// `max_i |analytic_i − fd_i| / max(‖fd‖_∞, 1e-12)`
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub checks: Vec<FdCheck>,
    pub tol: f64,
}

impl FdReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&FdCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FdCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

fn shifted(base: &[f64], dir: &[f64], t: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + t * d).collect()
}

fn unit(dim: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[i] = 1.0;
    e
}

/// Central-difference gradient of a scalar function.
fn fd_gradient(at: &[f64], h: f64, g: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let e = unit(at.len(), i);
            (g(&shifted(at, &e, h)) - g(&shifted(at, &e, -h))) / (2.0 * h)
        })
        .collect()
}

/// Central difference of a vector-valued function along `dir`.
fn fd_directional(at: &[f64], dir: &[f64], h: f64, g: impl Fn(&[f64]) -> Vector) -> Vec<f64> {
    let plus = g(&shifted(at, dir, h));
    let minus = g(&shifted(at, dir, -h));
    plus.iter().zip(minus.iter()).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Compares every analytic oracle against central differences at `(x, y)`.
///
/// Gradients are checked component-wise. Second-order products are checked
/// along a random direction `u` (seeded by `seed`): `∇²_yy·u` against the
/// directional difference of the gradient, and `∇²_xy·u` against the
/// x-gradient of `⟨∇_y(·), u⟩`. Upper-level second-order products are
/// checked when the problem provides them.
pub fn fd_check_gradients(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], h: f64, tol: f64, seed: u64) -> FdReport {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, analytic: &[f64], fd: &[f64]| {
        let e = rel_error(analytic, fd);
        checks.push(FdCheck { name, max_rel_error: e, passed: e <= tol });
    };

    let fd = fd_gradient(x, h, |xs| problem.ul_value(xs, y));
    push("grad_x_ul", &problem.grad_x_ul(x, y), &fd);
    let fd = fd_gradient(y, h, |ys| problem.ul_value(x, ys));
    push("grad_y_ul", &problem.grad_y_ul(x, y), &fd);
    let fd = fd_gradient(y, h, |ys| problem.ll_value(x, ys));
    push("grad_y_ll", &problem.grad_y_ll(x, y), &fd);

    let u = gaussian_vector(problem.ll_dim(), seed);
    let fd = fd_directional(y, &u, h, |ys| problem.grad_y_ll(x, ys));
    push("hvp_yy_ll", &problem.hvp_yy_ll(x, y, &u), &fd);
    let fd = fd_gradient(x, h, |xs| dot(&problem.grad_y_ll(xs, y), &u));
    push("jvp_xy_ll", &problem.jvp_xy_ll(x, y, &u), &fd);

    if let Some(upper) = problem.ul_second_order() {
        let fd = fd_directional(y, &u, h, |ys| problem.grad_y_ul(x, ys));
        push("hvp_yy_ul", &upper.hvp_yy_ul(x, y, &u), &fd);
        let fd = fd_gradient(x, h, |xs| dot(&problem.grad_y_ul(xs, y), &u));
        push("jvp_xy_ul", &upper.jvp_xy_ul(x, y, &u), &fd);
    }

    FdReport { checks, tol }
}
