//! Deterministic data-parallel helpers.
//!
//! With the `parallel` feature these fan work out to rayon; without it they
//! run serially. Work is always partitioned by index, never by completion
//! order, so outputs are bit-identical across thread counts and match the
//! sequential fallback exactly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, results ordered by index.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Map `f` over a slice, results ordered by input position.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
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

/// Number of indices in `0..n` satisfying `pred`. Integer addition is
/// associative, so the reduction order cannot matter.
pub fn count_where<F>(n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().filter(|&i| pred(i)).count()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).filter(|&i| pred(i)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_is_ordered() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn count_where_matches_serial() {
        assert_eq!(count_where(1000, |i| i % 7 == 0), 143);
    }
}
