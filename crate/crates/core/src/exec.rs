//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! pool; without it, or with [`Execution::Sequential`], the same closures run
//! in order on the calling thread. Results always come back in input order,
//! so reductions done by the caller are bit-identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
        }
    }

    /// Maps `f` over `(index, item)` pairs, preserving order.
    pub fn map_indexed<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    /// Maps `f` over fixed-size chunks. The chunk boundaries do not depend on
    /// the mode or the thread count.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            Execution::Sequential => items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let data: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&data, |x| x * x);
        let def = Execution::default().map(&data, |x| x * x);
        assert_eq!(seq, def);
        let chunks = Execution::default().map_chunks(&data, 7, |i, c| (i, c.iter().sum::<u64>()));
        assert_eq!(chunks.len(), 143);
        assert!(chunks.iter().enumerate().all(|(i, (j, _))| i == *j));
        let total: u64 = chunks.iter().map(|(_, s)| s).sum();
        assert_eq!(total, data.iter().sum::<u64>());
    }
}
