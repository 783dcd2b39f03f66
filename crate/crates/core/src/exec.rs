//! Execution mode for embarrassingly parallel job sets.
//!
//! Fold fits, decode jobs, pairwise correlation rows, and per-example
//! gradients are independent, so they can run on a rayon pool. Outputs are
//! always collected in job-index order and combined sequentially afterwards,
//! which makes parallel results bitwise identical to sequential ones. Without
//! the `parallel` feature [`ExecMode::Parallel`] silently degrades to the
//! sequential path.

/// How a batch of independent jobs is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Run jobs one after another on the calling thread.
    Sequential,
    /// Run jobs on the rayon thread pool (requires the `parallel` feature).
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => map_range_parallel(n, f),
    }
}

#[cfg(feature = "parallel")]
fn map_range_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_range_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}

/// Runs `op` on a dedicated rayon pool with the given thread count.
///
/// `threads == 0` leaves the pool size to rayon. Without the `parallel`
/// feature the closure runs directly on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_thread_count<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return op();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool");
    pool.install(op)
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_count<R: Send>(_threads: usize, op: impl FnOnce() -> R + Send) -> R {
    op()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_index_order() {
        let seq = map_range(ExecMode::Sequential, 100, |i| i * i);
        let par = map_range(ExecMode::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn float_reductions_agree_across_modes() {
        // Collect-then-fold keeps the summation order fixed, so the two
        // modes must agree bitwise even for non-associative float sums.
        let terms = |mode| map_range(mode, 1000, |i| ((i as f64) * 0.37).sin());
        let seq: f64 = terms(ExecMode::Sequential).iter().sum();
        let par: f64 = terms(ExecMode::Parallel).iter().sum();
        assert_eq!(seq.to_bits(), par.to_bits());
    }
}
