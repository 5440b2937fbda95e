//! Data-parallel map with a sequential fallback. All batch- and record-level
//! fan-out goes through here so the `parallel` feature is the only switch.
//!
//! Results come back indexed by input position, so downstream folds see the
//! same order regardless of thread count.

#[cfg(feature = "parallel")]
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    (0..n).map(f).collect()
}
