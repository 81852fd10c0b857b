use std::sync::Arc;

use rand::Rng;

use crate::metrics::{quadratic_oracle, MetricsError, QuadraticOracle};
use crate::problem::{BilevelProblem, UpperSecondOrder};
use crate::vecmat::{dot, gaussian_vector, seeded_rng, spectral_bounds, DenseMatrix, LinearOperator, Vector};

use super::TestbedError;

/// Symmetric positive-definite matrix representations used by the quadratic family.
#[derive(Clone, Debug)]
pub enum SpdMatrix {
    Identity(usize),
    Diagonal(Vec<f64>),
    /// `H·diag(eigenvalues)·H` with the Householder reflector `H = I − 2uuᵀ`, `‖u‖ = 1`.
    ///
    /// Non-diagonal, yet applied in O(n).
    Reflected { eigenvalues: Vec<f64>, u: Vec<f64> },
    Dense(DenseMatrix),
}

impl SpdMatrix {
    /// Known spectrum, when the representation carries it.
    pub fn eigenvalues(&self) -> Option<Vec<f64>> {
        match self {
            SpdMatrix::Identity(n) => Some(vec![1.0; *n]),
            SpdMatrix::Diagonal(d) => Some(d.clone()),
            SpdMatrix::Reflected { eigenvalues, .. } => Some(eigenvalues.clone()),
            SpdMatrix::Dense(_) => None,
        }
    }

    /// Checks symmetry and positive definiteness.
    ///
    /// Dense matrices are checked by an entry-wise symmetry test, a shifted
    /// power iteration for `λ_min`, and random Rayleigh quotients.
    pub fn validate(&self) -> Result<(), TestbedError> {
        if let Some(eig) = self.eigenvalues() {
            if eig.is_empty() {
                return Err(TestbedError::InvalidParameter("matrix dimension must be at least 1".into()));
            }
            if let Some(bad) = eig.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
                return Err(TestbedError::NotPositiveDefinite(format!("eigenvalue {bad}")));
            }
            return Ok(());
        }
        let SpdMatrix::Dense(m) = self else { unreachable!() };
        let scale = (0..m.dim()).map(|i| m.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
        if m.asymmetry() > 1e-12 * scale {
            return Err(TestbedError::NotPositiveDefinite(format!("asymmetry {:e}", m.asymmetry())));
        }
        let (lmin, _) = spectral_bounds(m, 1000, 0x5eed);
        if !(lmin > 0.0) {
            return Err(TestbedError::NotPositiveDefinite(format!("estimated smallest eigenvalue {lmin:e}")));
        }
        for s in 0..8 {
            let u = gaussian_vector(m.dim(), 0xface + s);
            if !(dot(&u, &m.apply(&u)) > 0.0) {
                return Err(TestbedError::NotPositiveDefinite("non-positive Rayleigh quotient".into()));
            }
        }
        Ok(())
    }
}

impl LinearOperator for SpdMatrix {
    fn dim(&self) -> usize {
        match self {
            SpdMatrix::Identity(n) => *n,
            SpdMatrix::Diagonal(d) => d.len(),
            SpdMatrix::Reflected { eigenvalues, .. } => eigenvalues.len(),
            SpdMatrix::Dense(m) => m.dim(),
        }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(x),
            SpdMatrix::Diagonal(d) => {
                for ((o, di), xi) in out.iter_mut().zip(d).zip(x) {
                    *o = di * xi;
                }
            }
            SpdMatrix::Reflected { eigenvalues, u } => {
                let ux = 2.0 * dot(u, x);
                for (((o, l), xi), ui) in out.iter_mut().zip(eigenvalues).zip(x).zip(u) {
                    *o = l * (xi - ux * ui);
                }
                let us = 2.0 * dot(u, out);
                for (o, ui) in out.iter_mut().zip(u) {
                    *o -= us * ui;
                }
            }
            SpdMatrix::Dense(m) => m.apply_into(x, out),
        }
    }
}

/// Spectrum of the generated matrix `A`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spectrum {
    Identity,
    /// Eigenvalues drawn log-uniformly from `[min, max]`, with both endpoints
    /// present when `n ≥ 2`, rotated by a random reflector.
    LogUniform { min: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Z0Spec {
    Ones,
    Random,
}

/// `F(x, y) = ½‖x − z₀‖² + ½⟨y, Ay⟩`, `f(x, y) = ½⟨y, Ay⟩ − ⟨x, y⟩` with `x, y ∈ Rⁿ`.
///
/// The lower level is strongly convex; `y*(x) = A⁻¹x`.
#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    a: Arc<SpdMatrix>,
    z0: Vector,
}

impl QuadraticBilevel {
    pub fn new(a: SpdMatrix, z0: Vector) -> Result<Self, TestbedError> {
        a.validate()?;
        if z0.dim() != a.dim() {
            return Err(TestbedError::DimensionMismatch { what: "z0", expected: a.dim(), found: z0.dim() });
        }
        Ok(QuadraticBilevel { a: Arc::new(a), z0 })
    }

    pub fn matrix(&self) -> &Arc<SpdMatrix> {
        &self.a
    }

    pub fn z0(&self) -> &Vector {
        &self.z0
    }

    pub fn oracle(&self) -> Result<QuadraticOracle, MetricsError> {
        quadratic_oracle(self.a.clone(), self.z0.clone())
    }
}

/// Builds a quadratic instance and its analytic oracle.
pub fn make_quadratic(
    n: usize,
    spectrum: Spectrum,
    z0: Z0Spec,
    seed: u64,
) -> Result<(QuadraticBilevel, QuadraticOracle), TestbedError> {
    if n == 0 {
        return Err(TestbedError::InvalidParameter("quadratic dimension must be at least 1".into()));
    }
    let a = match spectrum {
        Spectrum::Identity => SpdMatrix::Identity(n),
        Spectrum::LogUniform { min, max } => {
            if !(min > 0.0) || !(max >= min) || !max.is_finite() {
                return Err(TestbedError::InvalidParameter(format!("log-uniform spectrum needs 0 < min <= max, got [{min}, {max}]")));
            }
            let mut rng = seeded_rng(seed);
            let (lo, hi) = (min.ln(), max.ln());
            let mut eig: Vec<f64> = (0..n).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect();
            eig[0] = min;
            if n >= 2 {
                eig[n - 1] = max;
            }
            let mut u = gaussian_vector(n, seed ^ 0x9e37_79b9_7f4a_7c15);
            let nu = u.norm();
            u.scale_mut(1.0 / nu);
            SpdMatrix::Reflected { eigenvalues: eig, u: u.into_vec() }
        }
    };
    let z0 = match z0 {
        Z0Spec::Ones => Vector::filled(n, 1.0),
        Z0Spec::Random => gaussian_vector(n, seed.wrapping_add(1)),
    };
    let problem = QuadraticBilevel::new(a, z0)?;
    let oracle = problem.oracle()?;
    Ok((problem, oracle))
}

impl BilevelProblem for QuadraticBilevel {
    fn ul_dim(&self) -> usize {
        self.z0.dim()
    }
    fn ll_dim(&self) -> usize {
        self.z0.dim()
    }
    fn ul_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let dx = Vector::from_slice(x).sub(&self.z0);
        0.5 * dx.norm_sq() + 0.5 * dot(y, &self.a.apply(y))
    }
    fn ll_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * dot(y, &self.a.apply(y)) - dot(x, y)
    }
    fn grad_x_ul(&self, x: &[f64], _y: &[f64]) -> Vector {
        Vector::from_slice(x).sub(&self.z0)
    }
    fn grad_y_ul(&self, _x: &[f64], y: &[f64]) -> Vector {
        self.a.apply(y)
    }
    fn grad_y_ll(&self, x: &[f64], y: &[f64]) -> Vector {
        self.a.apply(y).sub(x)
    }
    fn hvp_yy_ll(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        self.a.apply(u)
    }
    fn jvp_xy_ll(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        u.iter().map(|v| -v).collect()
    }
    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        Some(self)
    }
}

impl UpperSecondOrder for QuadraticBilevel {
    fn hvp_yy_ul(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        self.a.apply(u)
    }
    fn jvp_xy_ul(&self, x: &[f64], _y: &[f64], _u: &[f64]) -> Vector {
        Vector::zeros(x.len())
    }
}
