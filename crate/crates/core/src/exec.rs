//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] maps work items
//! over the rayon pool. Without it, both variants run sequentially. Results
//! always come back in index order, so outputs are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Evaluates `f(i)` for `i in 0..n` and returns the results in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Fills `out` in chunks of `chunk` elements; `f` receives the chunk index
    /// and the mutable chunk.
    pub fn for_chunks<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let seq = Exec::Sequential.map(100, |i| (i * i) as f64);
        let par = Exec::Parallel.map(100, |i| (i * i) as f64);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49.0);
    }

    #[test]
    fn chunks_cover_everything() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut v = vec![0usize; 37];
            exec.for_chunks(&mut v, 5, |ci, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ci * 5 + j;
                }
            });
            assert!(v.iter().enumerate().all(|(i, &x)| i == x));
        }
    }
}
