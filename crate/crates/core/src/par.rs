//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run sequentially. Results always come back in input
//! order, so reductions over them are deterministic either way.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub fn map_range<U, F>(exec: Exec, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Splits `items` into at most `shards` contiguous chunks, maps each, and
/// returns the per-chunk results in order.
pub fn map_chunks<T, U, F>(exec: Exec, items: &[T], shards: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    if items.is_empty() {
        return Vec::new();
    }
    let size = items.len().div_ceil(shards.max(1));
    let chunks: Vec<&[T]> = items.chunks(size).collect();
    map(exec, &chunks, |c| f(c))
}

pub fn default_shards() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads().max(1) * 4
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
