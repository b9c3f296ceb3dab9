//! Data-parallel map over environments. Every environment owns its RNG
//! streams, so results do not depend on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug)]
pub enum Executor {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel(rayon::ThreadPool),
}

impl Executor {
    /// `workers == 1` (or a build without the `parallel` feature) runs
    /// sequentially; `0` uses every available core.
    pub fn new(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        if workers != 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return Executor::Parallel(pool);
            }
        }
        let _ = workers;
        Executor::Sequential
    }

    pub fn sequential() -> Self {
        Executor::Sequential
    }

    pub fn workers(&self) -> usize {
        match self {
            Executor::Sequential => 1,
            #[cfg(feature = "parallel")]
            Executor::Parallel(p) => p.current_num_threads(),
        }
    }

    /// `out[i] = f(i, &mut items[i])`, in order.
    pub fn map_mut<T, U, F>(&self, items: &mut [T], f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(usize, &mut T) -> U + Sync + Send,
    {
        match self {
            Executor::Sequential => items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect(),
            #[cfg(feature = "parallel")]
            Executor::Parallel(pool) => pool.install(|| items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()),
        }
    }
}
