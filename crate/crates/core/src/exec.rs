//! Execution strategy for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) row blocks are distributed over the
//! rayon pool; without it, or with [`Exec::Sequential`], the same closures run
//! on the calling thread. Every parallel loop writes disjoint rows and keeps
//! the per-row arithmetic order fixed, so results do not depend on the worker
//! count.

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

/// Fill the rows of a row-major buffer (`row_len` entries per row).
pub fn for_each_row<F>(exec: Exec, data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Map `0..n` to a vector, preserving index order in the output.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Number of worker threads requested through `GCKM_THREADS`, if set.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("GCKM_THREADS").ok()?.trim().parse().ok().filter(|&t: &usize| t > 0)
}

/// Run `f` inside a pool capped at `GCKM_THREADS` workers when that variable
/// is set; otherwise on the global pool.
pub fn with_thread_cap<T: Send, F: FnOnce() -> T + Send>(f: F) -> T {
    #[cfg(feature = "parallel")]
    if let Some(threads) = threads_from_env() {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    f()
}
