//! Runtime switch between sequential and rayon-backed data parallelism.
//!
//! Everything compute-heavy in this crate is data-parallel over independent
//! rows or episodes, so parallel and sequential execution produce bitwise
//! identical results: work is only ever split, never reordered or reduced
//! in a thread-dependent order. The `parallel` cargo feature compiles the
//! rayon path in; `Parallelism::Sequential` selects the fallback at runtime
//! (the CLI's `--single-threaded` flag).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Parallelism {
    /// Preferred mode: rayon when compiled in, sequential otherwise.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            Parallelism::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Parallelism::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        self != Parallelism::Sequential
    }
}

/// Apply `f` to each mutable chunk of `data`, in parallel when requested.
///
/// Chunks are indexed so callers can derive per-chunk offsets. `chunk_len`
/// must be nonzero.
pub fn for_each_chunk_mut<T: Send, F>(par: Parallelism, data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    match par {
        Parallelism::Sequential => {
            for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
                f(i, chunk);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        }
    }
}

/// Map `f` over indices `0..n`, collecting results in index order.
pub fn map_indexed<U: Send, F>(par: Parallelism, n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_mutation_matches_sequential() {
        let mut a: Vec<u64> = (0..1000).collect();
        let mut b = a.clone();
        let bump = |i: usize, c: &mut [u64]| {
            for x in c.iter_mut() {
                *x += i as u64;
            }
        };
        for_each_chunk_mut(Parallelism::Sequential, &mut a, 7, bump);
        for_each_chunk_mut(Parallelism::auto(), &mut b, 7, bump);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_index_order() {
        let out = map_indexed(Parallelism::auto(), 64, |i| i * i);
        assert_eq!(out, (0..64).map(|i| i * i).collect::<Vec<_>>());
    }
}
