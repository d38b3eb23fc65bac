//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the mapping helpers fan out over
//! rayon; without it they run plain loops. Results are collected in index
//! order either way, and reductions over floats are always performed
//! sequentially over the collected vector, so numeric output is identical
//! for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Sequential map, bypassing rayon regardless of features. Used by the
/// bench suite to compare against the parallel path.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sum in fixed index order. Never replace with a parallel reduction:
/// float addition is not associative and the determinism contract
/// requires identical results across thread counts.
pub fn sum_ordered(values: &[f64]) -> f64 {
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert_eq!(v[0], 0);
        assert_eq!(v[999], 1998);
        assert_eq!(v, map_indexed_seq(1000, |i| i * 2));
    }
}
