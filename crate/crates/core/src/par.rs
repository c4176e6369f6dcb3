//! Parallel map helper with a sequential fallback.
//!
//! With the `parallel` feature (default) the closure runs on rayon; without
//! it, or with `workers == Some(1)`, a plain loop runs instead. Results are
//! collected by index either way, so output never depends on scheduling.

/// Applies `f` to `0..count`, returning results in index order.
///
/// `workers`: `None` uses the global rayon pool (or the sequential fallback
/// when the `parallel` feature is off); `Some(1)` forces the sequential path;
/// `Some(w)` runs on a scoped pool of `w` threads.
pub fn run_indexed<R, F>(count: usize, workers: Option<usize>, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match workers {
            Some(1) => (0..count).map(f).collect(),
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(w).build();
                match pool {
                    Ok(pool) => pool.install(|| (0..count).into_par_iter().map(f).collect()),
                    // Pool creation can fail in constrained environments;
                    // single-threaded execution gives identical results.
                    Err(_) => (0..count).map(f).collect(),
                }
            }
            None => (0..count).into_par_iter().map(f).collect(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..count).map(f).collect()
    }
}
