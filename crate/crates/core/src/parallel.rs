//! Worker parallelism for per-sample work.
//!
//! Results are always collected in input order and reduced sequentially, so
//! the thread count never changes numerical output.

use std::sync::Arc;

use rayon::prelude::*;

/// Environment variable capping worker threads; `0` runs everything on the
/// calling thread.
pub const THREADS_ENV: &str = "XMRS_THREADS";

#[derive(Clone, Debug)]
pub struct Parallelism {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Parallelism {
    pub fn sequential() -> Self {
        Parallelism { pool: None }
    }

    pub fn with_threads(threads: usize) -> Self {
        if threads <= 1 {
            return Self::sequential();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool construction");
        Parallelism {
            pool: Some(Arc::new(pool)),
        }
    }

    /// Reads [`THREADS_ENV`]; unset or unparsable means all available cores.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self::with_threads(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Self::from_env()
    }
}
