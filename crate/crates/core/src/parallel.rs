//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan work out over a rayon pool
//! sized by the caller's worker count; without it they compile down to plain
//! iterator loops with the same signatures. Results are always collected in
//! input order and reduced in a fixed sequence, so the outputs are identical
//! across worker counts — parallelism changes wall time, never values.

/// Effective worker count: 0 means "use all available cores".
pub fn effective_workers(workers: usize) -> usize {
    if workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        workers
    }
}

#[cfg(feature = "parallel")]
pub fn par_map<I, O, F>(items: &[I], workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let workers = effective_workers(workers);
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    pool(workers).install(|| items.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<I, O, F>(items: &[I], _workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    items.iter().map(f).collect()
}

/// Index-space variant of [`par_map`].
#[cfg(feature = "parallel")]
pub fn par_map_range<O, F>(n: usize, workers: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync,
{
    let workers = effective_workers(workers);
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    pool(workers).install(|| (0..n).into_par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_range<O, F>(n: usize, _workers: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool")
}
