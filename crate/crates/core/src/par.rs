//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks of indices. Each chunk produces a
//! partial result, and partials are always combined left to right in chunk
//! order, so a parallel run is bitwise identical to a sequential one
//! regardless of the thread count. Without the `parallel` feature every
//! policy runs sequentially.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of indices handled by one task.
pub const DEFAULT_CHUNK: usize = 64;

/// How per-sample loops are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecPolicy {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled; sequential otherwise.
    Parallel,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }
}

impl ExecPolicy {
    /// Whether this policy actually fans out to worker threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

fn chunks(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Evaluates `f(i)` for every `i < n`, preserving index order.
pub fn map_indices<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Sums `f(range)` over fixed-size chunks of `0..n`.
pub fn sum_by_chunks<F>(policy: ExecPolicy, n: usize, chunk: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    let ranges = chunks(n, chunk);
    let partials: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            if policy.is_parallel() {
                ranges.into_par_iter().map(&f).collect()
            } else {
                ranges.into_iter().map(&f).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = policy;
            ranges.into_iter().map(&f).collect()
        }
    };
    partials.into_iter().sum()
}

/// Accumulates a `dim`-vector over fixed-size chunks of `0..n`.
///
/// `f(range, acc)` adds the contribution of the indices in `range` into a
/// zeroed buffer `acc` of length `dim`.
pub fn accumulate_by_chunks<F>(policy: ExecPolicy, n: usize, chunk: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let ranges = chunks(n, chunk);
    let run = |r: Range<usize>| {
        let mut acc = vec![0.0; dim];
        f(r, &mut acc);
        acc
    };
    let partials: Vec<Vec<f64>> = {
        #[cfg(feature = "parallel")]
        {
            if policy.is_parallel() {
                ranges.into_par_iter().map(run).collect()
            } else {
                ranges.into_iter().map(run).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = policy;
            ranges.into_iter().map(run).collect()
        }
    };
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
