//! Data-parallel helpers with a fixed reduction order.
//!
//! Work is split into chunks of [`CHUNK`] items; each chunk is folded
//! sequentially and chunk results are merged left to right. The grouping does
//! not depend on the thread count, so results are bit-identical with or
//! without the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items folded together before merging.
pub const CHUNK: usize = 8;

/// True when built with the `parallel` feature.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Folds `0..n` in chunks and merges the chunk accumulators in order.
pub fn fold_chunks<A, I, F, M>(n: usize, identity: I, fold: F, mut merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: FnMut(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let run = |c: usize| {
        let mut acc = identity();
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            fold(&mut acc, i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<A> = (0..chunks).into_par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<A> = (0..chunks).map(run).collect();
    let mut total = identity();
    for part in parts {
        merge(&mut total, part);
    }
    total
}

/// Order-preserving map.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(&f).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().map(&f).collect();
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(&f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..n).map(&f).collect();
}

/// Sizes the global worker pool. `None` reads `LAGSCOPE_THREADS` and falls
/// back to the library default. Has no effect once the pool exists, or in a
/// sequential build.
pub fn configure_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| std::env::var("LAGSCOPE_THREADS").ok()?.parse().ok());
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
