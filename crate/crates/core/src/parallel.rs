//! Order-preserving parallel map over path indices.
//!
//! Results come back indexed by path, and every reduction downstream walks
//! them in index order, so outputs are identical for any worker count.

/// Evaluates `f(0), …, f(n-1)` and returns them in index order.
///
/// `workers == 0` uses the global pool; `workers == 1` runs inline.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers == 1 {
            return (0..n).map(f).collect();
        }
        if workers == 0 {
            return (0..n).into_par_iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            Err(_) => (0..n).map(f).collect(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..n).map(f).collect()
    }
}
