use crate::metrics::AnalyticOracle;
use crate::problem::{BilevelProblem, UpperSecondOrder};
use crate::vecmat::Vector;

/// A bilevel problem whose lower level has a whole line of minimizers.
///
/// `x ∈ R`, `y = (y₁, y₂) ∈ R²`:
///
/// ```text
/// f(x, y) = ½y₁² − x·y₁                 (independent of y₂)
/// F(x, y) = ½(y₁ − 1)² + ½(y₂ − x)²
/// ```
///
/// `S(x) = {(x, t) : t ∈ R}`, `∇²_yy f = diag(1, 0)` is singular everywhere,
/// and `F` is 1-strongly convex in `y`. Minimizing `F` over `S(x)` selects
/// `y₂ = x`, which gives `φ(x) = ½(x − 1)²` and the solution `x* = 1`,
/// `y* = (1, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MultiMinimizerBilevel;

pub fn make_multimin() -> (MultiMinimizerBilevel, MultiMinimizerOracle) {
    (MultiMinimizerBilevel, MultiMinimizerOracle)
}

impl BilevelProblem for MultiMinimizerBilevel {
    fn ul_dim(&self) -> usize {
        1
    }
    fn ll_dim(&self) -> usize {
        2
    }
    fn ul_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * (y[0] - 1.0).powi(2) + 0.5 * (y[1] - x[0]).powi(2)
    }
    fn ll_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * y[0] * y[0] - x[0] * y[0]
    }
    fn grad_x_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        Vector::from(vec![x[0] - y[1]])
    }
    fn grad_y_ul(&self, x: &[f64], y: &[f64]) -> Vector {
        Vector::from(vec![y[0] - 1.0, y[1] - x[0]])
    }
    fn grad_y_ll(&self, x: &[f64], y: &[f64]) -> Vector {
        Vector::from(vec![y[0] - x[0], 0.0])
    }
    fn hvp_yy_ll(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        Vector::from(vec![u[0], 0.0])
    }
    fn jvp_xy_ll(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        Vector::from(vec![-u[0]])
    }
    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        Some(self)
    }
}

impl UpperSecondOrder for MultiMinimizerBilevel {
    fn hvp_yy_ul(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        Vector::from_slice(u)
    }
    fn jvp_xy_ul(&self, _x: &[f64], _y: &[f64], u: &[f64]) -> Vector {
        Vector::from(vec![-u[1]])
    }
}

/// Closed forms for [`MultiMinimizerBilevel`] on the optimistic selection.
#[derive(Clone, Copy, Debug, Default)]
pub struct MultiMinimizerOracle;

impl MultiMinimizerOracle {
    /// Diagonal of `∇²_yy ψ_μ = diag(μλ + 1 − μ, μλ)`.
    fn psi_curvature(mu: f64, lambda: f64) -> (f64, f64) {
        (mu * lambda + 1.0 - mu, mu * lambda)
    }
}

impl AnalyticOracle for MultiMinimizerOracle {
    fn y_star(&self, x: &[f64]) -> Vector {
        Vector::from(vec![x[0], x[0]])
    }

    fn phi(&self, x: &[f64]) -> f64 {
        0.5 * (x[0] - 1.0).powi(2)
    }

    fn grad_phi(&self, x: &[f64]) -> Vector {
        Vector::from(vec![x[0] - 1.0])
    }

    fn x_star(&self) -> Option<Vector> {
        Some(Vector::from(vec![1.0]))
    }

    fn y_star_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        let (c1, _) = Self::psi_curvature(mu, lambda);
        Some(Vector::from(vec![(mu * lambda + (1.0 - mu) * x[0]) / c1, x[0]]))
    }

    /// At `μλ = 0` the second curvature vanishes; the residual in that
    /// direction is zero on the selection, so the minimum-norm multiplier is used.
    fn v_star_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        let y = self.y_star_mu(x, mu, lambda)?;
        let (c1, c2) = Self::psi_curvature(mu, lambda);
        let g2 = y[1] - x[0];
        let v2 = if c2 > 0.0 { g2 / c2 } else { 0.0 };
        Some(Vector::from(vec![(y[0] - 1.0) / c1, v2]))
    }

    /// `∇φ_μ = ∇_x F − ∇²_xy ψ_μ · v*_μ` evaluated at `y*_μ(x)`.
    fn grad_phi_mu(&self, x: &[f64], mu: f64, lambda: f64) -> Option<Vector> {
        let y = self.y_star_mu(x, mu, lambda)?;
        let v = self.v_star_mu(x, mu, lambda)?;
        let gx = x[0] - y[1];
        Some(Vector::from(vec![gx + mu * lambda * v[1] + (1.0 - mu) * v[0]]))
    }
}
