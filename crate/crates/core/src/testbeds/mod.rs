//! Concrete problem families.
//!
//! - [`QuadraticBilevel`]: the strongly convex counter-example for one-step
//!   acceleration, scalable to high dimension with a matrix-free `A`.
//! - [`MultiMinimizerBilevel`]: a lower level with a line of minimizers and a
//!   singular Hessian.
//! - [`HyperCleaningProblem`]: sample reweighting for a softmax classifier
//!   trained on partially mislabeled data, plus data utilities.

mod data;
mod hypercleaning;
mod multimin;
mod quadratic;

use thiserror::Error;

use crate::metrics::MetricsError;

pub use data::{corrupt_labels, f1_clean, load_csv, load_idx, parse_idx_images, parse_idx_labels, synth_blobs, synth_split, Dataset, IdxImages, Position};
pub use hypercleaning::{sigmoid, HyperCleaningProblem};
pub use multimin::{make_multimin, MultiMinimizerBilevel, MultiMinimizerOracle};
pub use quadratic::{make_quadratic, QuadraticBilevel, SpdMatrix, Spectrum, Z0Spec};

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("{source_name}: parse error at {position}: {message}")]
    Parse { source_name: String, position: Position, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Oracle(#[from] MetricsError),
}
