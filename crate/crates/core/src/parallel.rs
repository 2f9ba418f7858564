//! Shared worker pool and ordered block-parallel map.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LDPNN_THREADS";

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// The process-wide pool, sized from `LDPNN_THREADS` on first use.
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool")
    })
}

/// Maps `f` over `0..count` on the pool. Results come back in index order, so
/// any reduction over them is independent of the thread count.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    pool().install(|| (0..count).into_par_iter().map(&f).collect())
}

/// Splits `total` items into blocks of `block` and maps `f(block_index, range)`.
pub fn map_blocks<T, F>(total: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, std::ops::Range<usize>) -> T + Sync + Send,
{
    let blocks = total.div_ceil(block);
    map_indexed(blocks, |b| {
        let start = b * block;
        f(b, start..(start + block).min(total))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_range_in_order() {
        let ranges = map_blocks(10, 4, |b, r| (b, r));
        assert_eq!(ranges, vec![(0, 0..4), (1, 4..8), (2, 8..10)]);
        assert!(map_blocks(0, 4, |_, r| r).is_empty());
    }
}
