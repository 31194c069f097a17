//! Execution policy for trajectory ensembles.
//!
//! Work is split into fixed chunks of trajectory indices and the per-chunk
//! results are returned in chunk order, so reductions never depend on the
//! number of workers or on completion order. With the `parallel` feature
//! disabled every policy runs sequentially.

use crate::error::Result;

/// Trajectories per work item.
pub const CHUNK_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    /// `workers == 0` uses the global rayon pool.
    Parallel { workers: usize },
}

impl Execution {
    pub fn with_workers(workers: usize) -> Self {
        if workers == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { workers }
        }
    }
}

/// `(start, end)` trajectory ranges of each chunk.
pub fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK_SIZE))
        .map(|c| (c * CHUNK_SIZE, ((c + 1) * CHUNK_SIZE).min(n)))
        .collect()
}

/// Runs `f` on every chunk and returns the results in chunk order.
pub fn map_chunks<T, F>(n: usize, exec: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync + Send,
{
    let ranges = chunk_ranges(n);
    match exec {
        Execution::Sequential => ranges.into_iter().map(|(a, b)| f(a, b)).collect(),
        Execution::Parallel { workers } => parallel::map(ranges, workers, f),
    }
}

#[cfg(feature = "parallel")]
mod parallel {
    use rayon::prelude::*;

    use crate::error::{Error, Result};

    pub(super) fn map<T, F>(ranges: Vec<(usize, usize)>, workers: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, usize) -> Result<T> + Sync + Send,
    {
        let run = || ranges.par_iter().map(|&(a, b)| f(a, b)).collect::<Result<Vec<T>>>();
        if workers == 0 {
            return run();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
        pool.install(run)
    }
}

#[cfg(not(feature = "parallel"))]
mod parallel {
    use crate::error::Result;

    pub(super) fn map<T, F>(ranges: Vec<(usize, usize)>, _workers: usize, f: F) -> Result<Vec<T>>
    where
        F: Fn(usize, usize) -> Result<T>,
    {
        ranges.into_iter().map(|(a, b)| f(a, b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range() {
        let r = chunk_ranges(300);
        assert_eq!(r.first(), Some(&(0, 128)));
        assert_eq!(r.last(), Some(&(256, 300)));
        assert!(chunk_ranges(0).is_empty());
    }

    #[test]
    fn results_keep_chunk_order() {
        for exec in [Execution::Sequential, Execution::Parallel { workers: 3 }] {
            let out = map_chunks(1000, exec, |a, b| Ok((a, b))).unwrap();
            assert_eq!(out, chunk_ranges(1000));
        }
    }
}
