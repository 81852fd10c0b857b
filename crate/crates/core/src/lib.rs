//! Bilevel optimization with dual correction.
//!
//! This crate solves problems of the form
//!
//! ```text
//! min_{x, y} F(x, y)   s.t.   y ∈ argmin_y f(x, y)
//! ```
//!
//! through the single-level reformulation `min F(x, y) s.t. ∇_y f(x, y) = 0`
//! and its Lagrangian `L = F − vᵀ∇_y f`. The main solver ([`solvers::bagdc_step`])
//! alternates one gradient step on the lower-level variable `y`, one correction
//! step on the multiplier `v`, and one step on the upper-level variable `x`.
//! Classical hypergradient baselines (one-step acceleration, reverse-mode
//! unrolling, implicit differentiation with CG or Neumann series, and descent
//! aggregation) are provided for comparison.
//!
//! Everything is matrix-free: problems expose Hessian-vector and mixed
//! Jacobian-vector products through [`problem::BilevelProblem`], never
//! materialized Hessians.
//!
//! # Modules
//! - [`vecmat`]: dense vectors, linear operators, CG, Neumann series, power iteration.
//! - [`problem`]: the oracle interface, aggregation `ψ_μ = μλF + (1−μ)f`, finite-difference checks.
//! - [`solvers`]: step-size schedules, the dual-corrected solver, baselines, and the run driver.
//! - [`metrics`]: analytic oracles, KKT residual, Lyapunov value, rate envelopes, trace rows.
//! - [`testbeds`]: quadratic counter-example, multi-minimizer problem, data hyper-cleaning.
//! - [`par`]: deterministic data-parallel helpers (rayon behind the `parallel` feature).
//!
//! # Example
//!
//! ```
//! use blo_core::solvers::{run_solver, Method, ScheduleConfig, StopCriteria};
//! use blo_core::testbeds::{make_quadratic, Spectrum, Z0Spec};
//! use blo_core::metrics::NullSink;
//!
//! let (problem, oracle) = make_quadratic(2, Spectrum::Identity, Z0Spec::Ones, 0).unwrap();
//! let schedule = ScheduleConfig::strongly_convex(0.1, 0.1, 0.1);
//! let stop = StopCriteria { max_iters: Some(10_000), d_norm_tol: Some(1e-8), ..Default::default() };
//! let outcome = run_solver(&problem, &Method::Bagdc, &schedule, &stop, None, Some(&oracle), &mut NullSink, Default::default());
//! assert!((outcome.state.x[0] - 0.5).abs() < 1e-6);
//! ```

pub mod metrics;
pub mod par;
pub mod problem;
pub mod solvers;
pub mod testbeds;
pub mod vecmat;

pub use problem::{BilevelProblem, UpperSecondOrder};
pub use vecmat::{LinearOperator, Vector};

/// Crate version, echoed into run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
