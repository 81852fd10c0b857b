//! Dense vectors and matrix-free linear operators.
//!
//! Solvers only ever need products `A·u`, so every matrix (explicit or not)
//! is consumed through [`LinearOperator`]. The kernels here are the building
//! blocks of the implicit hypergradient baselines: conjugate gradient,
//! truncated Neumann series, and power iteration for step-size defaults.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Errors raised by the linear-algebra kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {stage} at iteration {iteration}")]
    NonFinite { stage: &'static str, iteration: usize },
    #[error("operator is not positive definite: curvature {curvature:e} along the search direction at iteration {iteration}")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A dense vector of `f64` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Vector(values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self ← self + a·x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        debug_assert_eq!(self.0.len(), x.len());
        for (s, xi) in self.0.iter_mut().zip(x) {
            *s += a * xi;
        }
    }

    pub fn scale_mut(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Vector {
        self.0.iter().map(|s| a * s).collect()
    }

    /// `self − other`
    pub fn sub(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.0.len(), other.len());
        self.0.iter().zip(other).map(|(a, b)| a - b).collect()
    }

    /// `self + other`
    pub fn add(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.0.len(), other.len());
        self.0.iter().zip(other).map(|(a, b)| a + b).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A square linear map applied matrix-free.
///
/// Implementations must be safe to call from several threads at once.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// Writes `A·x` into `out`. Both slices have length [`dim`](Self::dim).
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.dim());
        self.apply_into(x, &mut out);
        out
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
}

impl<T: LinearOperator + ?Sized + Send> LinearOperator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
}

impl<T: LinearOperator + ?Sized + Send> LinearOperator for std::sync::Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IdentityOp(pub usize);

impl LinearOperator for IdentityOp {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ZeroOp(pub usize);

impl LinearOperator for ZeroOp {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct DiagonalOp(pub Vec<f64>);

impl LinearOperator for DiagonalOp {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, d), xi) in out.iter_mut().zip(&self.0).zip(x) {
            *o = d * xi;
        }
    }
}

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::DimensionMismatch { expected: n * n, found: data.len() });
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        DenseMatrix { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Largest absolute asymmetry `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnOperator { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Result of [`cg_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vector,
    pub iterations: usize,
    /// `false` when `max_iter` was exhausted before reaching the tolerance.
    pub converged: bool,
    pub relative_residual: f64,
}

/// Ratio below which a Rayleigh quotient `pᵀAp/pᵀp`, relative to the largest
/// one seen so far, is treated as zero curvature.
const CURVATURE_FLOOR: f64 = 1e-12;

/// Solves `op·x = b` for a symmetric positive-definite `op` by conjugate gradient.
///
/// Starts from `x = 0` and stops once `‖op·x − b‖ ≤ tol·‖b‖`. A non-positive
/// (or vanishing, relative to what has been seen) curvature along a search
/// direction aborts with [`LinalgError::NotPositiveDefinite`].
pub fn cg_solve<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution, LinalgError> {
    let n = op.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, found: b.len() });
    }
    if !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument(format!("cg tolerance must be positive, got {tol}")));
    }
    let b_norm = norm(b);
    if !b_norm.is_finite() {
        return Err(LinalgError::NonFinite { stage: "cg right-hand side", iteration: 0 });
    }
    let mut x = Vector::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgSolution { x, iterations: 0, converged: true, relative_residual: 0.0 });
    }

    let target = tol * b_norm;
    let mut r = Vector::from_slice(b);
    let mut p = r.clone();
    let mut ap = Vector::zeros(n);
    let mut rs = r.norm_sq();
    let mut max_rq = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        op.apply_into(&p, &mut ap);
        let p_ap = p.dot(&ap);
        let pp = p.norm_sq();
        let rq = p_ap / pp;
        if !rq.is_finite() {
            return Err(LinalgError::NonFinite { stage: "cg curvature", iteration: iterations });
        }
        max_rq = max_rq.max(rq);
        if rq <= 0.0 || rq <= CURVATURE_FLOOR * max_rq {
            return Err(LinalgError::NotPositiveDefinite { iteration: iterations, curvature: rq });
        }
        let alpha = rs / p_ap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.norm_sq();
        iterations += 1;
        if !rs_new.is_finite() {
            return Err(LinalgError::NonFinite { stage: "cg residual", iteration: iterations });
        }
        if rs_new.sqrt() <= target {
            rs = rs_new;
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
    }

    Ok(CgSolution { x, iterations, converged, relative_residual: rs.sqrt() / b_norm })
}

/// Truncated Neumann series `β·Σ_{j=0..M} (I − β·op)^j b`.
///
/// Approximates `op⁻¹ b` when `β·‖op‖ < 1`. Outside that range the series
/// grows geometrically and eventually fails with [`LinalgError::NonFinite`].
pub fn neumann_apply<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    step: f64,
    terms: usize,
) -> Result<Vector, LinalgError> {
    let n = op.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, found: b.len() });
    }
    if !(step > 0.0) {
        return Err(LinalgError::InvalidArgument(format!("neumann step must be positive, got {step}")));
    }
    let mut term = Vector::from_slice(b);
    let mut acc = term.clone();
    let mut scratch = Vector::zeros(n);
    for j in 1..=terms {
        op.apply_into(&term, &mut scratch);
        term.axpy(-step, &scratch);
        acc.axpy(1.0, &term);
        if !acc.is_finite() {
            return Err(LinalgError::NonFinite { stage: "neumann series", iteration: j });
        }
    }
    acc.scale_mut(step);
    if !acc.is_finite() {
        return Err(LinalgError::NonFinite { stage: "neumann series", iteration: terms });
    }
    Ok(acc)
}

/// Rayleigh-quotient estimate of the dominant eigenvalue of a symmetric operator.
///
/// Returns 0 for an operator that annihilates the start vector.
pub fn power_iteration_lmax<A: LinearOperator + ?Sized>(op: &A, iters: usize, seed: u64) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut v = gaussian_vector(n, seed);
    let nv = v.norm();
    v.scale_mut(1.0 / nv);
    let mut w = Vector::zeros(n);
    for _ in 0..iters.max(1) {
        op.apply_into(&v, &mut w);
        let nw = w.norm();
        if nw == 0.0 || !nw.is_finite() {
            return if nw == 0.0 { 0.0 } else { f64::NAN };
        }
        for (vi, wi) in v.iter_mut().zip(w.iter()) {
            *vi = wi / nw;
        }
    }
    op.apply_into(&v, &mut w);
    v.dot(&w)
}

/// Estimates `(λ_min, λ_max)` of a symmetric operator.
///
/// `λ_min` comes from power iteration on the shifted operator `λ_max·I − op`.
pub fn spectral_bounds<A: LinearOperator + ?Sized>(op: &A, iters: usize, seed: u64) -> (f64, f64) {
    let lmax = power_iteration_lmax(op, iters, seed);
    let n = op.dim();
    let shifted = FnOperator::new(n, |x: &[f64], out: &mut [f64]| {
        op.apply_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = lmax * xi - *o;
        }
    });
    let top = power_iteration_lmax(&shifted, iters, seed.wrapping_add(1));
    (lmax - top, lmax)
}

/// Deterministic generator used throughout the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal vector; the same seed always yields the same entries.
pub fn gaussian_vector(dim: usize, seed: u64) -> Vector {
    let mut rng = seeded_rng(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(d: &[f64]) -> DiagonalOp {
        DiagonalOp(d.to_vec())
    }

    /// Random SPD matrix `MᵀM + shift·I` with a brute-force dense product.
    fn random_spd(n: usize, seed: u64, shift: f64) -> DenseMatrix {
        let m = gaussian_vector(n * n, seed);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += m[k * n + i] * m[k * n + j];
                }
                data[i * n + j] = s / n as f64 + if i == j { shift } else { 0.0 };
            }
        }
        DenseMatrix::from_row_major(n, data).unwrap()
    }

    /// Gaussian elimination with partial pivoting, independent of CG.
    fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.dim();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, piv);
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
            x[r] = (m[r][n] - s) / m[r][r];
        }
        x
    }

    #[test]
    fn cg_identity_one_iteration() {
        let sol = cg_solve(&IdentityOp(2), &[3.0, -1.0], 1e-10, 100).unwrap();
        assert_eq!(sol.x.as_slice(), &[3.0, -1.0]);
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
    }

    #[test]
    fn cg_diagonal_two_by_two() {
        let sol = cg_solve(&diag(&[2.0, 4.0]), &[2.0, 4.0], 1e-12, 100).unwrap();
        assert!(sol.iterations <= 2);
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cg_zero_rhs() {
        let sol = cg_solve(&diag(&[2.0, 4.0]), &[0.0, 0.0], 1e-12, 100).unwrap();
        assert_eq!(sol.x.as_slice(), &[0.0, 0.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn cg_flags_unreached_accuracy() {
        let a = random_spd(20, 3, 0.01);
        let b = gaussian_vector(20, 4);
        let sol = cg_solve(&a, &b, 1e-14, 2).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn cg_rejects_singular_and_indefinite() {
        let err = cg_solve(&diag(&[1.0, 0.0]), &[1.0, 1.0], 1e-12, 10).unwrap_err();
        assert!(matches!(err, LinalgError::NotPositiveDefinite { .. }), "{err:?}");
        let err = cg_solve(&diag(&[1.0, -2.0]), &[0.0, 1.0], 1e-12, 10).unwrap_err();
        assert!(matches!(err, LinalgError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn cg_non_finite_rhs() {
        let err = cg_solve(&IdentityOp(2), &[f64::NAN, 0.0], 1e-8, 10).unwrap_err();
        assert!(matches!(err, LinalgError::NonFinite { .. }));
    }

    #[test]
    fn cg_matches_dense_elimination() {
        for seed in 0..5 {
            let a = random_spd(15, seed, 0.5);
            let b = gaussian_vector(15, seed + 100);
            let sol = cg_solve(&a, &b, 1e-12, 200).unwrap();
            let exact = dense_solve(&a, &b);
            let err: f64 = sol.x.distance(&exact);
            assert!(err <= 1e-9 * norm(&exact), "seed {seed}: {err}");
        }
    }

    #[test]
    fn neumann_examples() {
        let one = neumann_apply(&IdentityOp(2), &[1.0, 0.0], 1.0, 0).unwrap();
        assert_eq!(one.as_slice(), &[1.0, 0.0]);
        let two = neumann_apply(&IdentityOp(2), &[1.0, 0.0], 0.5, 1).unwrap();
        assert!((two[0] - 0.75).abs() < 1e-15 && two[1] == 0.0);
        let lim = neumann_apply(&IdentityOp(2), &[1.0, 0.0], 0.5, 50).unwrap();
        assert!((lim[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn neumann_diverges_outside_radius() {
        let err = neumann_apply(&diag(&[10.0]), &[1.0], 1.0, 2000).unwrap_err();
        assert!(matches!(err, LinalgError::NonFinite { .. }));
    }

    #[test]
    fn power_iteration_examples() {
        assert!((power_iteration_lmax(&IdentityOp(5), 10, 0) - 1.0).abs() < 1e-8);
        assert!((power_iteration_lmax(&diag(&[1.0, 10.0]), 100, 0) - 10.0).abs() < 1e-6);
        assert_eq!(power_iteration_lmax(&ZeroOp(4), 10, 0), 0.0);
    }

    #[test]
    fn spectral_bounds_diagonal() {
        let (lo, hi) = spectral_bounds(&diag(&[0.5, 2.0, 3.0]), 500, 1);
        assert!((lo - 0.5).abs() < 1e-6 && (hi - 3.0).abs() < 1e-6, "{lo} {hi}");
    }

    #[test]
    fn gaussian_examples() {
        let a = gaussian_vector(3, 7);
        let b = gaussian_vector(3, 7);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let big = gaussian_vector(100_000, 1);
        let mean = big.iter().sum::<f64>() / big.dim() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        let one = gaussian_vector(1, 0);
        assert_eq!(one.dim(), 1);
        assert!(one[0].is_finite());
    }

    #[test]
    fn cg_reaches_tolerance_within_dimension() {
        for d in [1usize, 2, 5, 10, 25, 50] {
            let a = random_spd(d, d as u64, 1.0);
            let b = gaussian_vector(d, 77);
            let sol = cg_solve(&a, &b, 1e-8, d).unwrap();
            assert!(sol.converged, "d = {d}, residual {}", sol.relative_residual);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn neumann_telescopes(seed in 0u64..1000, m in 0usize..30) {
            let a = random_spd(6, seed, 0.5);
            let b = gaussian_vector(6, seed + 1);
            let beta = 0.9 / power_iteration_lmax(&a, 200, seed);
            let s_m = neumann_apply(&a, &b, beta, m).unwrap();
            let s_m1 = neumann_apply(&a, &b, beta, m + 1).unwrap();
            // β·(I − βA)^{M+1} b by repeated application
            let mut t = Vector::from_slice(&b);
            for _ in 0..=m {
                let at = a.apply(&t);
                t.axpy(-beta, &at);
            }
            let expect = s_m.add(&t.scaled(beta));
            prop_assert!(expect.distance(&s_m1) <= 1e-12 * (1.0 + s_m1.norm()));
        }

        #[test]
        fn cg_agrees_with_long_neumann(seed in 0u64..1000, d in 1usize..=20) {
            let a = random_spd(d, seed, 0.5);
            let b = gaussian_vector(d, seed + 7);
            let lmax = power_iteration_lmax(&a, 500, seed);
            let cg = cg_solve(&a, &b, 1e-13, 500).unwrap();
            let ns = neumann_apply(&a, &b, 0.9 / lmax, 10_000).unwrap();
            prop_assert!(cg.x.distance(&ns) <= 1e-6 * norm(&b));
        }

        #[test]
        fn dense_symmetric_operator_is_symmetric(seed in 0u64..1000) {
            let a = random_spd(8, seed, 0.1);
            let u = gaussian_vector(8, seed + 1);
            let w = gaussian_vector(8, seed + 2);
            let lhs = dot(&u, &a.apply(&w));
            let rhs = dot(&w, &a.apply(&u));
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }
}
