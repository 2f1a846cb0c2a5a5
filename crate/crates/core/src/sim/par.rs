//! Trial-level parallelism with a sequential fallback.

/// How trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Worker pool (size from `STBEM_THREADS` when set) if the `parallel`
    /// feature is enabled, sequential otherwise.
    #[default]
    Parallel,
    Sequential,
}

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "STBEM_THREADS";

/// Worker count requested through [`THREADS_ENV`], if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

/// `f(0..n)` in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => parallel_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
    match requested_threads() {
        Some(threads) => match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(_) => (0..n).map(&f).collect(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let a = map_indexed(50, Execution::Parallel, |i| i * i);
        let b = map_indexed(50, Execution::Sequential, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }
}
