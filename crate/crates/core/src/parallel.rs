//! Bounded worker pool for independent per-round work.
//!
//! With the `parallel` feature, a pool of width > 1 runs on a dedicated
//! rayon thread pool. Without it, or at width 1, work runs sequentially on
//! the calling thread. Results always come back in input order.

#[derive(Debug)]
pub struct WorkerPool {
    width: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl WorkerPool {
    pub fn new(width: usize) -> Self {
        let width = width.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (width > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(width)
                    .thread_name(|i| format!("manner-align-{i}"))
                    .build()
                    .expect("building worker pool")
            });
            Self { width, pool }
        }
        #[cfg(not(feature = "parallel"))]
        Self { width }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        return self.pool.is_some();
        #[cfg(not(feature = "parallel"))]
        false
    }

    /// Maps `f` over `items`, returning results in input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

/// Sum in a fixed pairwise tree order, so the result does not depend on
/// how the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}
