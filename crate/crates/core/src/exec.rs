//! Execution strategy for the data-parallel inner loops.
//!
//! Every kernel that fans out over independent rows (matrix products, row
//! softmax, per-query dissolution) or independent runs (percentile sweeps)
//! goes through [`Exec`]. Work items never share an accumulator, so the
//! sequential and parallel strategies produce bit-identical results.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    /// Plain loop on the calling thread.
    Sequential,
    /// Rayon work-stealing pool.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        return Exec::Parallel;

        #[cfg(not(feature = "parallel"))]
        return Exec::Sequential;
    }
}

impl Exec {
    /// Strategies compiled into this build.
    pub fn available() -> &'static [Exec] {
        #[cfg(feature = "parallel")]
        return &[Exec::Sequential, Exec::Parallel];

        #[cfg(not(feature = "parallel"))]
        return &[Exec::Sequential];
    }

    /// Applies `f` to each `width`-sized row of `data` together with its index.
    pub fn for_each_row<F>(self, data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Send + Sync,
    {
        if width == 0 || data.is_empty() {
            return;
        }
        match self {
            Exec::Sequential => data
                .chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(width)
                    .enumerate()
                    .for_each(|(i, row)| f(i, row))
            }
        }
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_for_every_strategy() {
        for &exec in Exec::available() {
            let out = exec.map(100, |i| i * i);
            assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn for_each_row_sees_row_indices() {
        for &exec in Exec::available() {
            let mut data = vec![0.0; 12];
            exec.for_each_row(&mut data, 3, |i, row| row.iter_mut().for_each(|v| *v = i as f64));
            assert_eq!(data, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
        }
    }

    #[test]
    fn zero_width_is_a_no_op() {
        Exec::default().for_each_row(&mut [], 0, |_, _| panic!("called"));
    }
}
