//! Order-preserving fan-out of independent per-sample work.

use std::num::NonZeroUsize;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "UGNN_THREADS";

pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// `f(0), …, f(n−1)` computed on up to `threads` workers; results keep index
/// order, so output is independent of the worker count.
pub fn par_map<R: Send, F: Fn(usize) -> R + Sync>(n: usize, threads: usize, f: F) -> Vec<R> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_worker_count() {
        let serial = par_map(37, 1, |i| i * i);
        for t in [2, 3, 8, 100] {
            assert_eq!(par_map(37, t, |i| i * i), serial);
        }
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
