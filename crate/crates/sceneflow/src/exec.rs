//! Deterministic execution helpers shared by the numeric kernels.
//!
//! Per-point work goes through [`map_indexed`], which writes results into an
//! index-ordered buffer, and every loss reduction goes through
//! [`pairwise_sum`], whose reduction tree depends only on the slice length.
//! Together these make every result bit-identical whether the `parallel`
//! feature is enabled or not, and for any rayon thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this size the parallel path falls back to the sequential one; the
/// per-call pool overhead dominates for tiny batches.
const PAR_THRESHOLD: usize = 64;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n < PAR_THRESHOLD {
        map_indexed_seq(n, f)
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential reference path; also the fallback when `parallel` is disabled.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps `f` over fixed-size index chunks, collecting the partial results in
/// chunk order. Callers fold the partials sequentially, which keeps
/// accumulation order independent of the thread count.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    let n_chunks = n.div_ceil(chunk);
    map_indexed(n_chunks, |c| {
        let lo = c * chunk;
        let hi = usize::min(lo + chunk, n);
        f(lo..hi)
    })
}

/// Fixed-order pairwise summation.
///
/// The split points are a function of the slice length alone, so the result
/// does not depend on how the values were produced. Pairwise accumulation
/// also keeps rounding error at O(log n) instead of O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Pairwise mean; zero for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_matches_sequential() {
        let f = |i: usize| (i as f64).sin() * (i as f64);
        let par = map_indexed(1000, f);
        let seq = map_indexed_seq(1000, f);
        assert_eq!(par, seq);
    }

    #[test]
    fn map_chunks_covers_all_indices() {
        let chunks = map_chunks(103, 16, |r| r.len());
        assert_eq!(chunks.iter().sum::<usize>(), 103);
        assert_eq!(chunks.len(), 7);
    }

    #[test]
    fn pairwise_sum_exact_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn pairwise_sum_is_length_deterministic() {
        let xs: Vec<f64> = (0..777).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs.clone());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn pairwise_mean_empty_is_zero() {
        assert_eq!(pairwise_mean(&[]), 0.0);
    }
}
