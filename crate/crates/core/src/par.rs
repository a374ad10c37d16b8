//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work is spread over the rayon pool unless the
//! caller asks for single-threaded execution. Results are always returned in
//! input order, so both paths are bitwise identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when allowed.
pub fn map<T, R, F>(items: &[T], single_thread: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !single_thread {
        return items.par_iter().map(f).collect();
    }
    let _ = single_thread;
    items.iter().map(f).collect()
}

/// Maps `f` over fixed-size chunks of `items`.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, single_thread: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if !single_thread {
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = single_thread;
    items.chunks(chunk).map(f).collect()
}

pub fn is_parallel_build() -> bool {
    cfg!(feature = "parallel")
}
