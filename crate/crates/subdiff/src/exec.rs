//! Execution policy for the embarrassingly parallel loops (Monte Carlo
//! replications, per-point weight evaluation, PIT batches).
//!
//! With the `parallel` feature the `Parallel` policy runs on the rayon pool;
//! without it every policy runs sequentially. Results are always collected in
//! index order, so reductions done by the caller are bit-identical across
//! policies and thread counts.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Splits `0..n` into fixed chunks and evaluates `f` on each chunk range.
/// Chunk boundaries do not depend on the policy, which keeps floating point
/// reductions reproducible.
pub fn map_chunks<T, F>(exec: Execution, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map(exec, count, |c| {
        let start = c * chunk;
        f(start..(start + chunk).min(n))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(map(Execution::Parallel, 1000, f), map(Execution::Sequential, 1000, f));
        let sums = |e| -> f64 {
            map_chunks(e, 10_001, 97, |r| r.map(|i| (i as f64).ln_1p()).sum::<f64>())
                .into_iter()
                .sum()
        };
        assert_eq!(sums(Execution::Parallel).to_bits(), sums(Execution::Sequential).to_bits());
    }

    #[test]
    fn empty_range() {
        assert!(map_chunks(Execution::Parallel, 0, 8, |r| r.len()).is_empty());
    }
}
