//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Every helper preserves output order, and
//! reductions inside a closure are always sequential, so results are
//! bit-identical across both builds and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in scalar multiply-adds) below which row loops stay on the calling thread.
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runs `f(row_index, row)` over consecutive `row_len` chunks of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / row_len;
        if rows > 1 && rows * work_per_row >= MIN_PARALLEL_WORK && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
            return;
        }
    }
    let _ = work_per_row;
    out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Order-preserving map over a slice.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Number of worker threads the parallel helpers can use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// True when the crate was built with rayon support.
pub const fn enabled() -> bool {
    cfg!(feature = "parallel")
}
