//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) batches fan out over a rayon pool;
//! without it, or with `threads <= 1`, everything runs sequentially. Results
//! are collected in input order either way, so a given thread count is fully
//! deterministic. Note that the single-threaded path shares one tape across
//! a batch (more sub-expression reuse) while workers use per-table tapes, so
//! gradient summation order -- and therefore the last bits of a checkpoint --
//! is a function of the thread count. Bit-exact reproducibility is promised
//! per thread count, in particular at `--threads 1`.

/// Number of workers that will actually be used for a request.
pub fn effective_threads(requested: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        requested.max(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        if requested > 1 {
            log::warn!("built without the `parallel` feature; running single-threaded");
        }
        1
    }
}

/// Install a global rayon pool of the requested size. Safe to call more than
/// once; later calls keep the first configuration.
#[cfg(feature = "parallel")]
pub fn configure_pool(threads: usize) {
    if threads > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_pool(_threads: usize) {}

/// Map `f` over `items`, in parallel when `threads > 1`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(threads: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if threads <= 1 {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(_threads: usize, items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = map_ordered(4, &items, |x| x * 2);
        assert_eq!(doubled, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }
}
