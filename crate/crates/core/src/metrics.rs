//! Analytic oracles and evaluation metrics.
//!
//! The KKT residual measures stationarity of the single-level reformulation
//! `min F(x, y) s.t. ∇_y f(x, y) = 0` through its Lagrangian
//! `L(x, y, v) = F(x, y) − vᵀ∇_y f(x, y)`. The remaining metrics need a
//! closed-form [`AnalyticOracle`] and are reported as empty otherwise.

use std::io;
use std::sync::Arc;

use thiserror::Error;

use crate::problem::{AggregatedProblem, BilevelProblem};
use crate::vecmat::{cg_solve, dot, gaussian_vector, FnOperator, LinalgError, LinearOperator, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("{0} needs an analytic oracle")]
    MissingOracle(&'static str),
    #[error("operator is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("envelope point K = {k} needs {k} trace records, trace has {len}")]
    TraceTooShort { k: usize, len: usize },
    #[error("envelope point K must be at least 1")]
    ZeroK,
}

/// Closed-form solution information for a testbed.
///
/// `φ(x) = F(x, y*(x))` on the optimistic selection of lower-level solutions.
/// The μ-variants refer to the aggregated inner objective
/// `ψ_μ = μλF + (1 − μ)f`: `y*_μ(x)` minimizes `ψ_μ(x, ·)` and
/// `v*_μ(x) = [∇²_yy ψ_μ]⁻¹ ∇_y F(x, y*_μ(x))`.
pub trait AnalyticOracle: Sync {
    fn y_star(&self, x: &[f64]) -> Vector;
    fn phi(&self, x: &[f64]) -> f64;
    fn grad_phi(&self, x: &[f64]) -> Vector;
    /// Solution of the bilevel problem, when known.
    fn x_star(&self) -> Option<Vector>;
    fn y_star_mu(&self, _x: &[f64], _mu: f64, _lambda: f64) -> Option<Vector> {
        None
    }
    fn v_star_mu(&self, _x: &[f64], _mu: f64, _lambda: f64) -> Option<Vector> {
        None
    }
    /// Gradient of `φ_μ(x) = F(x, y*_μ(x))`.
    fn grad_phi_mu(&self, _x: &[f64], _mu: f64, _lambda: f64) -> Option<Vector> {
        None
    }
}

const ORACLE_CG_TOL: f64 = 1e-12;

/// Oracle of the quadratic counter-example
/// `F = ½‖x − z₀‖² + ½⟨y, Ay⟩`, `f = ½⟨y, Ay⟩ − ⟨x, y⟩`.
///
/// Inverses of `A` are applied by CG to a relative residual of `1e-12`.
#[derive(Clone)]
pub struct QuadraticOracle {
    a: Arc<dyn LinearOperator + Send + Sync>,
    z0: Vector,
    x_star: Vector,
}

impl std::fmt::Debug for QuadraticOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticOracle").field("dim", &self.z0.dim()).field("x_star", &self.x_star).finish()
    }
}

fn cg_max_iter(n: usize) -> usize {
    10 * n + 100
}

/// Builds the oracle for a symmetric positive-definite `a`.
///
/// Positive definiteness is witnessed by random Rayleigh quotients and by the
/// curvature checks of a CG solve with `a`.
pub fn quadratic_oracle<A>(a: Arc<A>, z0: Vector) -> Result<QuadraticOracle, MetricsError>
where
    A: LinearOperator + Send + Sync + 'static,
{
    let n = a.dim();
    if z0.dim() != n {
        return Err(MetricsError::DimensionMismatch { what: "z0", expected: n, found: z0.dim() });
    }
    for s in 0..3 {
        let u = gaussian_vector(n, 0x5eed + s);
        let rq = dot(&u, &a.apply(&u)) / u.norm_sq();
        if !(rq > 0.0) {
            return Err(MetricsError::NotPositiveDefinite(format!("Rayleigh quotient {rq:e} along a random direction")));
        }
    }
    cg_solve(a.as_ref(), &z0, ORACLE_CG_TOL, cg_max_iter(n)).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => MetricsError::NotPositiveDefinite(e.to_string()),
        other => MetricsError::Linalg(other),
    })?;
    let shifted = FnOperator::new(n, |u: &[f64], out: &mut [f64]| {
        a.apply_into(u, out);
        for (o, ui) in out.iter_mut().zip(u) {
            *o += ui;
        }
    });
    let x_star = cg_solve(&shifted, &a.apply(&z0), ORACLE_CG_TOL, cg_max_iter(n))?.x;
    Ok(QuadraticOracle { a, z0, x_star })
}

impl QuadraticOracle {
    /// `A⁻¹ b`. A failed solve yields NaN entries, which surface in every metric.
    fn solve(&self, b: &[f64]) -> Vector {
        let n = self.z0.dim();
        cg_solve(self.a.as_ref(), b, ORACLE_CG_TOL, cg_max_iter(n)).map_or_else(|_| Vector::filled(n, f64::NAN), |s| s.x)
    }

    fn curvature(mu: f64, lambda: f64) -> f64 {
        mu * lambda + 1.0 - mu
    }
}

impl AnalyticOracle for QuadraticOracle {
    fn y_star(&self, x: &[f64]) -> Vector {
        self.solve(x)
    }

    fn phi(&self, x: &[f64]) -> f64 {
        let dx = Vector::from_slice(x).sub(&self.z0);
        0.5 * dx.norm_sq() + 0.5 * dot(x, &self.solve(x))
    }

    fn grad_phi(&self, x: &[f64]) -> Vector {
        Vector::from_slice(x).sub(&self.z0).add(&self.solve(x))
    }

    fn x_star(&self) -> Option<Vector> {
        Some(self.x_star.clone())
    }

    fn y_star_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        Some(self.solve(x).scaled((1.0 - mu) / Self::curvature(mu, lambda)))
    }

    fn v_star_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        let c = Self::curvature(mu, lambda);
        Some(self.solve(x).scaled((1.0 - mu) / (c * c)))
    }

    fn grad_phi_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        let v = self.v_star_mu(x, mu, lambda)?;
        let mut g = Vector::from_slice(x).sub(&self.z0);
        g.axpy(1.0 - mu, &v);
        Some(g)
    }
}

/// The three blocks of `‖∇L(x, y, v)‖²`, always with the original `f`:
/// `‖∇_xF − ∇²_xy f·v‖²`, `‖∇_yF − ∇²_yy f·v‖²`, `‖∇_y f‖²`.
pub fn kkt_terms(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], v: &[f64]) -> [f64; 3] {
    let tx = problem.grad_x_ul(x, y).sub(&problem.jvp_xy_ll(x, y, v));
    let ty = problem.grad_y_ul(x, y).sub(&problem.hvp_yy_ll(x, y, v));
    let tc = problem.grad_y_ll(x, y);
    [tx.norm_sq(), ty.norm_sq(), tc.norm_sq()]
}

/// KKT residual `‖∇L(x, y, v)‖²` of the single-level reformulation.
pub fn kkt_residual(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], v: &[f64]) -> f64 {
    kkt_terms(problem, x, y, v).iter().sum()
}

/// The same residual with `ψ_μ` in place of `f`, for diagnostics.
pub fn aggregated_kkt_residual(psi: &AggregatedProblem<'_>, x: &[f64], y: &[f64], v: &[f64]) -> f64 {
    let base = psi.base();
    let tx = base.grad_x_ul(x, y).sub(&psi.jvp_xy(x, y, v));
    let ty = base.grad_y_ul(x, y).sub(&psi.hvp_yy(x, y, v));
    let tc = psi.grad_y(x, y);
    tx.norm_sq() + ty.norm_sq() + tc.norm_sq()
}

/// `‖d − ∇φ(x)‖`.
pub fn hypergrad_error(d: &[f64], oracle: Option<&dyn AnalyticOracle>, x: &[f64]) -> Result<f64, MetricsError> {
    let oracle = oracle.ok_or(MetricsError::MissingOracle("hypergradient error"))?;
    Ok(oracle.grad_phi(x).distance(d))
}

/// `V = F(x, y*_μ(x)) + ½‖y − y*_μ(x)‖² + ½‖v − v*_μ(x)‖²`.
pub fn lyapunov_value(
    problem: &dyn BilevelProblem,
    oracle: Option<&dyn AnalyticOracle>,
    x: &[f64],
    y: &[f64],
    v: &[f64],
    mu: f64,
    lambda: f64,
) -> Result<f64, MetricsError> {
    let oracle = oracle.ok_or(MetricsError::MissingOracle("Lyapunov value"))?;
    let ys = oracle.y_star_mu(x, mu, lambda).ok_or(MetricsError::MissingOracle("Lyapunov value (y*_mu)"))?;
    let vs = oracle.v_star_mu(x, mu, lambda).ok_or(MetricsError::MissingOracle("Lyapunov value (v*_mu)"))?;
    Ok(problem.ul_value(x, &ys) + 0.5 * ys.distance(y).powi(2) + 0.5 * vs.distance(v).powi(2))
}

/// Oracle-only columns of a trace row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleMetrics {
    pub grad_phi_norm: Option<f64>,
    pub dist_x_rel: Option<f64>,
    pub dist_y: Option<f64>,
    pub lyapunov: Option<f64>,
}

/// Evaluates every oracle-only metric available from `oracle`.
pub fn oracle_metrics(
    problem: &dyn BilevelProblem,
    oracle: Option<&dyn AnalyticOracle>,
    x: &[f64],
    y: &[f64],
    v: &[f64],
    mu: f64,
    lambda: f64,
) -> OracleMetrics {
    let Some(o) = oracle else {
        return OracleMetrics::default();
    };
    let dist_x_rel = o.x_star().map(|xs| {
        let scale = xs.norm();
        let dist = xs.distance(x);
        if scale > 0.0 { dist / scale } else { dist }
    });
    let target_y = o.y_star_mu(x, mu, lambda).or_else(|| (mu == 0.0).then(|| o.y_star(x)));
    OracleMetrics {
        grad_phi_norm: Some(o.grad_phi(x).norm()),
        dist_x_rel,
        dist_y: target_y.map(|t| t.distance(y)),
        lyapunov: lyapunov_value(problem, oracle, x, y, v, mu, lambda).ok(),
    }
}

/// Column names of a trace, in order.
pub const TRACE_COLUMNS: [&str; 16] = [
    "k",
    "wall_seconds",
    "ul_value",
    "ll_value",
    "d_norm",
    "kkt_residual",
    "grad_phi_norm",
    "dist_x_rel",
    "dist_y",
    "lyapunov",
    "mu",
    "alpha",
    "beta",
    "eta",
    "hvp_count",
    "jvp_count",
];

/// One row of a run trace, recorded after outer iteration `k`.
///
/// `hvp_count`/`jvp_count` are the Hessian- and Jacobian-vector products
/// spent by that iteration alone.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TraceRecord {
    pub k: u64,
    pub wall_seconds: f64,
    pub ul_value: f64,
    pub ll_value: f64,
    pub d_norm: f64,
    pub kkt_residual: f64,
    pub grad_phi_norm: Option<f64>,
    pub dist_x_rel: Option<f64>,
    pub dist_y: Option<f64>,
    pub lyapunov: Option<f64>,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub hvp_count: u64,
    pub jvp_count: u64,
}

impl TraceRecord {
    /// Cells in [`TRACE_COLUMNS`] order; absent oracle metrics are empty strings.
    pub fn to_row(&self) -> [String; 16] {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        [
            self.k.to_string(),
            self.wall_seconds.to_string(),
            self.ul_value.to_string(),
            self.ll_value.to_string(),
            self.d_norm.to_string(),
            self.kkt_residual.to_string(),
            opt(self.grad_phi_norm),
            opt(self.dist_x_rel),
            opt(self.dist_y),
            opt(self.lyapunov),
            self.mu.to_string(),
            self.alpha.to_string(),
            self.beta.to_string(),
            self.eta.to_string(),
            self.hvp_count.to_string(),
            self.jvp_count.to_string(),
        ]
    }

    pub fn metric(&self, metric: TraceMetric) -> Option<f64> {
        match metric {
            TraceMetric::DNorm => Some(self.d_norm),
            TraceMetric::KktResidual => Some(self.kkt_residual),
            TraceMetric::GradPhiNorm => self.grad_phi_norm,
            TraceMetric::GradPhiNormSq => self.grad_phi_norm.map(|g| g * g),
            TraceMetric::DistXRel => self.dist_x_rel,
            TraceMetric::DistY => self.dist_y,
            TraceMetric::Lyapunov => self.lyapunov,
        }
    }
}

/// The iterate a trace row was computed at.
#[derive(Clone, Copy, Debug)]
pub struct Iterate<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub v: &'a [f64],
}

/// Receives trace rows as a run progresses.
pub trait TraceSink {
    fn record(&mut self, record: &TraceRecord, iterate: Iterate<'_>) -> io::Result<()>;
}

/// Discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _record: &TraceRecord, _iterate: Iterate<'_>) -> io::Result<()> {
        Ok(())
    }
}

/// Keeps every row in memory.
#[derive(Clone, Debug, Default)]
pub struct VecSink {
    pub records: Vec<TraceRecord>,
}

impl TraceSink for VecSink {
    fn record(&mut self, record: &TraceRecord, _iterate: Iterate<'_>) -> io::Result<()> {
        self.records.push(*record);
        Ok(())
    }
}

impl<S: TraceSink + ?Sized> TraceSink for &mut S {
    fn record(&mut self, record: &TraceRecord, iterate: Iterate<'_>) -> io::Result<()> {
        (**self).record(record, iterate)
    }
}

/// Scalar series that can be read off a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMetric {
    DNorm,
    KktResidual,
    GradPhiNorm,
    GradPhiNormSq,
    DistXRel,
    DistY,
    Lyapunov,
}

/// One row of a convergence-rate envelope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvelopeRow {
    pub k: usize,
    /// Minimum over the first `k` records.
    pub prefix_min: f64,
    /// `K·min`, bounded for an `O(1/K)` rate.
    pub k_times_min: f64,
    /// `K^{1−11p}·min / ln K`, bounded for an `O(ln K / K^{1−11p})` rate;
    /// `None` at `K = 1`.
    pub log_normalized: Option<f64>,
}

/// Envelope of a raw series: prefix minima over the first `K` values.
pub fn rate_envelope_values(values: &[f64], k_grid: &[usize], p: f64) -> Result<Vec<EnvelopeRow>, MetricsError> {
    k_grid
        .iter()
        .map(|&k| {
            if k == 0 {
                return Err(MetricsError::ZeroK);
            }
            if k > values.len() {
                return Err(MetricsError::TraceTooShort { k, len: values.len() });
            }
            let prefix_min = values[..k].iter().cloned().fold(f64::INFINITY, f64::min);
            let kf = k as f64;
            Ok(EnvelopeRow {
                k,
                prefix_min,
                k_times_min: kf * prefix_min,
                log_normalized: (k > 1).then(|| kf.powf(1.0 - 11.0 * p) * prefix_min / kf.ln()),
            })
        })
        .collect()
}

/// Envelope of `metric` over a trace.
pub fn rate_envelope(trace: &[TraceRecord], metric: TraceMetric, k_grid: &[usize], p: f64) -> Result<Vec<EnvelopeRow>, MetricsError> {
    let values: Option<Vec<f64>> = trace.iter().map(|r| r.metric(metric)).collect();
    let values = values.ok_or(MetricsError::MissingOracle("rate envelope of an oracle-only metric"))?;
    rate_envelope_values(&values, k_grid, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::aggregate;
    use crate::testbeds::{make_quadratic, Spectrum, Z0Spec};
    use crate::vecmat::{cg_solve, DiagonalOp, IdentityOp};

    fn unit_quadratic() -> (crate::testbeds::QuadraticBilevel, QuadraticOracle) {
        make_quadratic(2, Spectrum::Identity, Z0Spec::Ones, 0).unwrap()
    }

    #[test]
    fn identity_oracle_values() {
        let (_, o) = unit_quadratic();
        let xs = o.x_star().unwrap();
        assert!(xs.distance(&[0.5, 0.5]) < 1e-12);
        // ½‖x − z₀‖² + ½‖x‖² = 0.25 + 0.25 at x = (½, ½)
        assert!((o.phi(&xs) - 0.5).abs() < 1e-12);
        assert!(o.grad_phi(&[1.0, 1.0]).distance(&[1.0, 1.0]) < 1e-12);
        let x = [0.3, -2.0];
        assert!(o.y_star_mu(&x, 0.0, 1.0).unwrap().distance(&o.y_star(&x)) == 0.0);
    }

    #[test]
    fn rejects_non_pd_operator() {
        let err = quadratic_oracle(Arc::new(DiagonalOp(vec![1.0, -1.0])), Vector::filled(2, 1.0)).unwrap_err();
        assert!(matches!(err, MetricsError::NotPositiveDefinite(_)), "{err:?}");
        assert!(quadratic_oracle(Arc::new(IdentityOp(3)), Vector::filled(2, 1.0)).is_err());
    }

    #[test]
    fn kkt_examples() {
        let (p, o) = unit_quadratic();
        assert!((kkt_residual(&p, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]) - 2.0).abs() < 1e-15);
        let xs = o.x_star().unwrap();
        let ys = o.y_star(&xs);
        assert!(kkt_residual(&p, &xs, &ys, &ys) <= 1e-12);
    }

    #[test]
    fn kkt_middle_term_vanishes_at_exact_multiplier() {
        let (p, _) = make_quadratic(6, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 4).unwrap();
        let a = p.matrix().clone();
        for s in 0..20 {
            let x = gaussian_vector(6, 10 + s);
            let y = gaussian_vector(6, 50 + s);
            let v = cg_solve(a.as_ref(), &p.grad_y_ul(&x, &y), 1e-14, 100).unwrap().x;
            let terms = kkt_terms(&p, &x, &y, &v);
            assert!(terms[1] <= 1e-20 * p.grad_y_ul(&x, &y).norm_sq().max(1.0), "{terms:?}");
        }
    }

    /// Over `v` the residual is `‖g_x + v‖² + ‖g_y − Av‖² + const`, minimized
    /// by the least-squares multiplier `(I + A²)v = A g_y − g_x`.
    #[test]
    fn kkt_minimized_at_least_squares_multiplier() {
        let (p, _) = make_quadratic(6, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 4).unwrap();
        let a = p.matrix().clone();
        let normal = FnOperator::new(6, |u: &[f64], out: &mut [f64]| {
            let au = a.apply(u);
            let aau = a.apply(&au);
            for ((o, ui), w) in out.iter_mut().zip(u).zip(aau.iter()) {
                *o = ui + w;
            }
        });
        for s in 0..20 {
            let x = gaussian_vector(6, 10 + s);
            let y = gaussian_vector(6, 50 + s);
            let rhs = a.apply(&p.grad_y_ul(&x, &y)).sub(&p.grad_x_ul(&x, &y));
            let v = cg_solve(&normal, &rhs, 1e-14, 200).unwrap().x;
            let best = kkt_residual(&p, &x, &y, &v);
            for t in 0..5 {
                let w = v.add(&gaussian_vector(6, 1000 * s + t).scaled(1e-3));
                assert!(kkt_residual(&p, &x, &y, &w) >= best);
            }
        }
    }

    #[test]
    fn kkt_zero_iff_stationary() {
        let (p, o) = make_quadratic(5, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 6).unwrap();
        let xs = o.x_star().unwrap();
        let ys = o.y_star(&xs);
        assert!(o.grad_phi(&xs).norm() <= 1e-10);
        assert!(kkt_residual(&p, &xs, &ys, &ys) <= 1e-20);
        for s in 0..5 {
            let x = gaussian_vector(5, 40 + s);
            let y = o.y_star(&x);
            assert!(o.grad_phi(&x).norm() > 1e-3);
            assert!(kkt_residual(&p, &x, &y, &y) > 1e-6);
        }
    }

    #[test]
    fn oracle_self_consistency() {
        let (p, o) = make_quadratic(8, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 2).unwrap();
        for s in 0..20u64 {
            let x = gaussian_vector(8, 200 + s);
            let mu = 0.5 * (s as f64) / 20.0;
            let psi = aggregate(&p, mu, 1.0).unwrap();
            let y = o.y_star_mu(&x, mu, 1.0).unwrap();
            assert!(psi.grad_y(&x, &y).norm() <= 1e-9);
            assert!(p.grad_y_ll(&x, &o.y_star(&x)).norm() <= 1e-10 * x.norm().max(1.0));
            let v = o.v_star_mu(&x, mu, 1.0).unwrap();
            assert!(p.grad_y_ul(&x, &y).distance(&psi.hvp_yy(&x, &y, &v)) <= 1e-9);
        }
    }

    #[test]
    fn grad_phi_mu_matches_finite_difference() {
        let (p, o) = make_quadratic(4, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 3).unwrap();
        let x = gaussian_vector(4, 1);
        let (mu, lambda) = (0.3, 2.0);
        let phi_mu = |x: &[f64]| p.ul_value(x, &o.y_star_mu(x, mu, lambda).unwrap());
        let g = o.grad_phi_mu(&x, mu, lambda).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (phi_mu(&xp) - phi_mu(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn hypergrad_error_examples() {
        let (_, o) = unit_quadratic();
        let x = [0.2, 0.7];
        assert_eq!(hypergrad_error(&o.grad_phi(&x), Some(&o), &x).unwrap(), 0.0);
        let xbar = [2.0 / 3.0, 2.0 / 3.0];
        let e = hypergrad_error(&[0.0, 0.0], Some(&o), &xbar).unwrap();
        assert!((e - 2f64.sqrt() / 3.0).abs() < 1e-12);
        assert!(hypergrad_error(&x, None, &x).is_err());
    }

    #[test]
    fn lyapunov_examples() {
        let (p, o) = unit_quadratic();
        let z = [0.0, 0.0];
        assert!((lyapunov_value(&p, Some(&o), &z, &z, &z, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);

        let x = [0.4, -0.1];
        let ys = o.y_star_mu(&x, 0.2, 1.0).unwrap();
        let vs = o.v_star_mu(&x, 0.2, 1.0).unwrap();
        let v = lyapunov_value(&p, Some(&o), &x, &ys, &vs, 0.2, 1.0).unwrap();
        assert_eq!(v, p.ul_value(&x, &ys));

        // λ = 1 gives μλ + 1 − μ = 1, so y*_μ = v*_μ and the penalties are symmetric
        let y = [1.0, 2.0];
        let w = [-0.5, 0.25];
        let a = lyapunov_value(&p, Some(&o), &x, &y, &w, 0.2, 1.0).unwrap();
        let b = lyapunov_value(&p, Some(&o), &x, &w, &y, 0.2, 1.0).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(lyapunov_value(&p, None, &x, &y, &w, 0.2, 1.0).is_err());
    }

    #[test]
    fn envelope_examples() {
        let ones = vec![3.0; 100];
        let rows = rate_envelope_values(&ones, &[10, 100], 1.0 / 12.0).unwrap();
        assert_eq!(rows[0].k_times_min, 30.0);
        assert_eq!(rows[1].k_times_min, 300.0);

        let harmonic: Vec<f64> = (0..1000).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        for row in rate_envelope_values(&harmonic, &[1, 10, 100, 1000], 1.0 / 12.0).unwrap() {
            assert!(row.k_times_min <= 1.0 + 1e-12);
        }
        assert!(rate_envelope_values(&harmonic, &[], 0.0).unwrap().is_empty());
        assert!(matches!(rate_envelope_values(&harmonic, &[1001], 0.0), Err(MetricsError::TraceTooShort { .. })));
    }

    #[test]
    fn trace_row_leaves_missing_oracle_cells_empty() {
        let r = TraceRecord { k: 3, d_norm: 0.5, grad_phi_norm: Some(0.25), ..Default::default() };
        let row = r.to_row();
        assert_eq!(row.len(), TRACE_COLUMNS.len());
        assert_eq!(row[0], "3");
        assert_eq!(row[6], "0.25");
        assert_eq!(row[7], "");
        assert_eq!(row[9], "");
    }
}
