//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Without it, or while [`force_sequential`] is set, every helper runs the
//! same closures in order on the calling thread. Chunk boundaries never depend
//! on the thread count, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution at runtime (used by benchmarks and tests).
pub fn force_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when helpers will actually fan out to worker threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed)
}

/// Runs `f` with parallelism disabled, restoring the previous setting.
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = SEQUENTIAL.swap(true, Ordering::SeqCst);
    let out = f();
    SEQUENTIAL.store(prev, Ordering::SeqCst);
    out
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len` sized pieces.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_both_modes() {
        let mut a = vec![0usize; 103];
        for_each_chunk_mut(&mut a, 10, |i, c| c.iter_mut().for_each(|v| *v = i));
        let mut b = vec![0usize; 103];
        with_sequential(|| {
            for_each_chunk_mut(&mut b, 10, |i, c| c.iter_mut().for_each(|v| *v = i))
        });
        assert_eq!(a, b);
        assert_eq!(a[102], 10);
    }

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..50).collect();
        assert_eq!(map(&v, |x| x * 2), (0..50).map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}
