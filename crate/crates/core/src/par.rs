//! Execution policy for the embarrassingly parallel loops (Monte-Carlo
//! trials, sweep cells, seed batches).
//!
//! Results are always collected in input order and every work item carries
//! its own seed, so sequential and parallel execution give identical output.
//! Without the `parallel` feature, `Execution::Parallel` runs sequentially.

/// Environment variable capping the worker count.
pub const WORKERS_ENV: &str = "GROKLAB_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// `workers = 0` lets the thread pool pick.
    Parallel { workers: usize },
}

impl Default for Execution {
    fn default() -> Self {
        Execution::Parallel { workers: 0 }
    }
}

impl Execution {
    /// Parallel execution capped by `GROKLAB_WORKERS` when set. A value of 1
    /// selects sequential execution.
    pub fn from_env() -> Self {
        match std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(1) => Execution::Sequential,
            Some(n) => Execution::Parallel { workers: n },
            None => Execution::default(),
        }
    }

    /// Order-preserving map over `items`.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match *self {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Parallel { workers } => parallel_map(items, f, workers),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], f: F, workers: usize) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if workers == 0 {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
        Err(_) => items.par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], f: F, _workers: usize) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| crate::rng::derive_seed(*x, 3);
        let a = Execution::Sequential.map(&items, f);
        let b = Execution::Parallel { workers: 0 }.map(&items, f);
        let c = Execution::Parallel { workers: 3 }.map(&items, f);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
