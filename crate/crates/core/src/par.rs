//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper preserves input order in its output, so results are identical
//! with and without the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Like [`map`] but also hands the element index to `f`.
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Dot product of `query` against each `dim`-wide row of a row-major matrix.
pub fn row_dots(matrix: &[f64], dim: usize, query: &[f64]) -> Vec<f64> {
    debug_assert_eq!(query.len(), dim);
    if dim == 0 {
        return Vec::new();
    }
    let dot = |row: &[f64]| row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>();
    #[cfg(feature = "parallel")]
    {
        matrix.par_chunks_exact(dim).map(dot).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        matrix.chunks_exact(dim).map(dot).collect()
    }
}
