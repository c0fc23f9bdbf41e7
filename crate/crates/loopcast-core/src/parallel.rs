//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) the map runs on the rayon pool;
//! without it the same code runs sequentially. Output order always matches
//! input order, so callers that reduce results serially get identical
//! floating-point answers under either backend.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential map; kept unconditionally so benches can compare the
/// two paths and tests can pin a serial reduction.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map indexed work items `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Cap the global worker count. No-op in the sequential build.
#[cfg(feature = "parallel")]
pub fn limit_workers(jobs: usize) {
    if jobs > 0 {
        // Ignore the error if a pool was already built; the cap is advisory.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn limit_workers(_jobs: usize) {}
