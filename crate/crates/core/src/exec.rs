//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper hands out disjoint chunks and returns results in index order,
//! so parallel and sequential execution produce bitwise-identical output.
//! Without the `parallel` feature everything runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Selects the execution strategy process-wide. Requests for parallel
/// execution are ignored when the crate is built without `parallel`.
pub fn set_parallelism(mode: Parallelism) {
    let on = mode == Parallelism::Parallel && cfg!(feature = "parallel");
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallelism() -> Parallelism {
    if PARALLEL.load(Ordering::Relaxed) {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    }
}

/// Runs `f` with the given strategy, restoring the previous one afterwards.
pub fn with_parallelism<R>(mode: Parallelism, f: impl FnOnce() -> R) -> R {
    let prev = parallelism();
    set_parallelism(mode);
    let out = f();
    set_parallelism(prev);
    out
}

/// Calls `f(i, chunk)` on consecutive `chunk`-sized pieces of `out` and
/// collects the return values in chunk order.
pub fn map_chunks_mut<T, R, F>(out: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallelism() == Parallelism::Parallel {
        use rayon::prelude::*;
        return out
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    out.chunks_mut(chunk)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    map_chunks_mut(out, chunk, f);
}

/// `(0..n).map(f)` in index order, possibly evaluated in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallelism() == Parallelism::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
