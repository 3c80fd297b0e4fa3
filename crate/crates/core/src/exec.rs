//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, indexed maps fan out over rayon. Results are
//! always collected in index order, so callers that reduce sequentially over
//! the output get bit-identical results in both modes. Reference mode forces
//! the sequential path at runtime.

/// Runtime execution policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Use rayon when compiled with the `parallel` feature.
    #[default]
    Parallel,
    /// Single-threaded reference order.
    Reference,
}

impl Exec {
    pub fn from_reference_flag(reference: bool) -> Self {
        if reference {
            Exec::Reference
        } else {
            Exec::Parallel
        }
    }

    pub fn is_reference(self) -> bool {
        matches!(self, Exec::Reference)
    }

    /// `(0..n).map(f).collect()`, possibly in parallel, always in order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Apply `f` to every element of `items` with its index.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            }
            _ => items.iter_mut().enumerate().for_each(|(i, t)| f(i, t)),
        }
    }

    /// Apply `f` to consecutive `chunk`-sized slices of `items` with their
    /// chunk index.
    pub fn for_each_chunk_mut<T, F>(self, items: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items
                    .par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, t)| f(i, t));
            }
            _ => items
                .chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, t)| f(i, t)),
        }
    }
}
