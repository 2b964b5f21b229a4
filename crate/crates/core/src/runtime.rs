//! Deterministic parallelism.
//!
//! Per-example work fans out over a thread pool, but every reduction is an
//! index-ordered sum over a FIXED number of stripes, so results are
//! bit-identical no matter how many worker threads run (including one).
//! `SNL_THREADS` caps the pool size.

use std::ops::Range;
use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

/// Number of contiguous stripes a batch is split into. Fixed by design:
/// the reduction order must not depend on the thread count.
pub const STRIPES: usize = 16;

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// The crate-wide pool, built on first use. Thread count comes from
/// `SNL_THREADS` when set, otherwise rayon's default.
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads_from_env() {
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .expect("failed to build the worker thread pool")
    })
}

fn threads_from_env() -> Option<usize> {
    let raw = std::env::var("SNL_THREADS").ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Some(n),
        _ => None,
    }
}

/// Contiguous stripe ranges covering `0..n` (at most [`STRIPES`] of them).
pub fn stripe_ranges(n: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let stripes = STRIPES.min(n);
    let base = n / stripes;
    let extra = n % stripes;
    let mut out = Vec::with_capacity(stripes);
    let mut start = 0;
    for s in 0..stripes {
        let len = base + usize::from(s < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Fold `fold(acc, i)` over `i ∈ 0..n` within each stripe (sequentially, in
/// index order), running stripes in parallel. Returns the per-stripe
/// accumulators in stripe order; the caller combines them sequentially.
pub fn par_fold_stripes<T, I, F>(n: usize, init: I, fold: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> T + Sync,
    F: Fn(&mut T, usize) + Sync,
{
    let ranges = stripe_ranges(n);
    pool().install(|| {
        ranges
            .into_par_iter()
            .map(|r| {
                let mut acc = init();
                for i in r {
                    fold(&mut acc, i);
                }
                acc
            })
            .collect()
    })
}
