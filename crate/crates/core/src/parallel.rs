//! Worker-thread budget and deterministic row partitioning.
//!
//! Work is split into contiguous row bands, one per worker, and results are
//! returned in band order. [`map_blocks`] fixes the block size instead of the
//! block count, so reductions over its results do not depend on the thread
//! count.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable capping worker threads; `0` means one per core.
pub const THREADS_ENV: &str = "SPLATPERC_THREADS";

const UNSET: usize = usize::MAX;
static THREADS: AtomicUsize = AtomicUsize::new(UNSET);

/// Current worker-thread count (always ≥ 1).
pub fn thread_count() -> usize {
    let n = THREADS.load(Ordering::Relaxed);
    if n != UNSET {
        return n;
    }
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let n = resolve(requested);
    THREADS.store(n, Ordering::Relaxed);
    n
}

/// Overrides the thread budget for the whole process; `0` means auto.
pub fn set_thread_count(requested: usize) {
    THREADS.store(resolve(requested), Ordering::Relaxed);
}

fn resolve(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        requested
    }
}

/// Splits `0..len` into at most `parts` contiguous, near-equal ranges.
pub fn bands(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, len.max(1));
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Runs `f` on each row band, in parallel when more than one thread is
/// configured, and returns the results in band order.
pub fn map_bands<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let parts = bands(rows, thread_count());
    if parts.len() == 1 {
        return parts.into_iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .into_iter()
            .map(|band| {
                let f = &f;
                s.spawn(move || f(band))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Runs `f` on consecutive blocks of `block` rows and returns one result per
/// block, in row order, whatever the thread count.
pub fn map_blocks<T, F>(rows: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let block = block.max(1);
    let count = rows.div_ceil(block);
    let blocks = |r: Range<usize>| -> Vec<T> { r.map(|b| f(b * block..((b + 1) * block).min(rows))).collect() };
    let parts = bands(count, thread_count());
    if parts.len() <= 1 {
        return blocks(0..count);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .into_iter()
            .map(|band| {
                let blocks = &blocks;
                s.spawn(move || blocks(band))
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_cover_range() {
        for len in 0..40 {
            for parts in 1..9 {
                let b = bands(len, parts);
                assert_eq!(b.first().unwrap().start, 0);
                assert_eq!(b.last().unwrap().end, len);
                for w in b.windows(2) {
                    assert_eq!(w[0].end, w[1].start);
                }
            }
        }
    }

    #[test]
    fn blocks_ignore_thread_count() {
        let run = || map_blocks(37, 8, |r| r.collect::<Vec<_>>());
        set_thread_count(1);
        let one = run();
        set_thread_count(3);
        let three = run();
        set_thread_count(0);
        assert_eq!(one, three);
        assert_eq!(one.len(), 5);
        assert_eq!(one.concat(), (0..37).collect::<Vec<_>>());
    }
}
