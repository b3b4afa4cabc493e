//! Execution strategy for the crate's data-parallel loops.
//!
//! Heavy loops (trajectory generation, per-node dumbbell ensembles,
//! per-snapshot network passes, evaluation rollouts) are expressed as an
//! indexed map over a fixed partition of the work. The partition is a
//! function of the problem size only, never of the thread count, and
//! reductions always run in index order, so `Parallel` and `Sequential`
//! produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to run an indexed map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Use the rayon thread pool. Without the `parallel` feature this
    /// silently degrades to sequential execution.
    #[default]
    Parallel,
    Sequential,
}

/// `(0..len).map(f)` collected in index order.
pub fn map_indexed<R, F>(exec: Execution, len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..len).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => (0..len).map(f).collect(),
        Execution::Sequential => (0..len).map(f).collect(),
    }
}

/// Apply `f` to each element of `items` in place.
pub fn for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item)),
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => {
            for (i, item) in items.iter_mut().enumerate() {
                f(i, item);
            }
        }
        Execution::Sequential => {
            for (i, item) in items.iter_mut().enumerate() {
                f(i, item);
            }
        }
    }
}

/// Splits `0..len` into chunks of `chunk_size` (the last one may be short),
/// returning `(start, end)` pairs. The chunking depends only on `len`, which
/// keeps floating-point reduction order reproducible.
pub fn chunk_ranges(len: usize, chunk_size: usize) -> Vec<(usize, usize)> {
    assert!(chunk_size > 0);
    (0..len.div_ceil(chunk_size))
        .map(|c| (c * chunk_size, ((c + 1) * chunk_size).min(len)))
        .collect()
}
