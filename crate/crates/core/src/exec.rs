//! Row-parallel execution helpers.
//!
//! With the `parallel` feature the loops below fan out over rayon; without it
//! they run as plain sequential loops. Reductions always produce one partial
//! per row and fold the partials in row order, so results are bit-identical
//! across thread counts and across the two build modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to each `width`-sized row of `data` with its row index.
pub(crate) fn for_each_row_mut<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Applies `f` to row `i` of two buffers chunked by their own row widths
/// (e.g. the dx and dy planes of a flow field, or an interleaved feature
/// plane and its per-pixel mask). Both buffers must hold the same number of
/// rows.
pub(crate) fn for_each_row_pair_mut<T, U, F>(
    a: &mut [T],
    width_a: usize,
    b: &mut [U],
    width_b: usize,
    f: F,
) where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync,
{
    debug_assert!(width_a > 0 && a.len() % width_a == 0);
    debug_assert!(width_b > 0 && b.len() % width_b == 0);
    debug_assert_eq!(a.len() / width_a, b.len() / width_b);
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(width_a)
        .zip(b.par_chunks_mut(width_b))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
    #[cfg(not(feature = "parallel"))]
    for (i, (ra, rb)) in a.chunks_mut(width_a).zip(b.chunks_mut(width_b)).enumerate() {
        f(i, ra, rb);
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub(crate) fn collect_indexed<A, F>(n: usize, f: F) -> Vec<A>
where
    A: Send,
    F: Fn(usize) -> A + Sync + Send,
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

/// Sum of per-row partials folded in row order.
pub(crate) fn sum_rows<F>(rows: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    collect_indexed(rows, f).into_iter().sum()
}

/// Runs `f` on a single thread. With the `parallel` feature this installs a
/// one-thread rayon pool so the data-parallel loops execute serially; without
/// it the call is direct. Used by benchmarks and single-threaded timing runs.
#[cfg(feature = "parallel")]
pub fn with_sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("building a one-thread pool cannot fail")
        .install(f)
}

/// Runs `f` on a single thread (sequential build: plain call).
#[cfg(not(feature = "parallel"))]
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    f()
}

/// Caps the global rayon pool at `n` threads. Must be called before any
/// parallel work; later calls are ignored. No-op in the sequential build.
pub fn limit_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
