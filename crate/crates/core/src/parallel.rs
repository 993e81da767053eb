//! Data-parallel helpers. With the `parallel` feature they run on the rayon
//! pool; without it they are plain sequential loops. Results are returned in
//! input order either way, so outputs do not depend on the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// [`par_map`] when `parallel` is true, a sequential map otherwise.
pub fn map_maybe_parallel<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallel {
        par_map(items, f)
    } else {
        items.iter().map(f).collect()
    }
}

/// Calls `f(i, chunk, scratch)` for every `width`-sized chunk of `data`.
/// Chunks are independent, so the parallel and sequential paths produce the
/// same bytes. Small inputs stay on the calling thread.
pub fn for_each_chunk_mut<S, I, F>(data: &mut [f32], width: usize, init: I, f: F)
where
    I: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut [f32], &mut S) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if data.len() / width.max(1) >= PARALLEL_MIN_ROWS {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each_init(&init, |s, (i, c)| f(i, c, s));
        return;
    }
    let mut s = init();
    for (i, c) in data.chunks_mut(width).enumerate() {
        f(i, c, &mut s);
    }
}

/// Row count below which splitting work across threads costs more than it saves.
pub const PARALLEL_MIN_ROWS: usize = 16;

/// Whether the rayon backend is compiled in.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
