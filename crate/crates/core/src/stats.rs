//! Order statistics over any floating-point scalar.
//!
//! Latency quantiles use the nearest-rank definition: the p-quantile of `n`
//! sorted values is the element at 1-based rank `ceil(p * n)` (minimum rank 1).
//! Baseline statistics use the conventional median (mean of the two middle
//! elements for even `n`) and the median absolute deviation around it.

use std::cmp::Ordering;

use num_traits::Float;

fn total_cmp<T: Float>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Sorts a copy of `values` ascending. NaN values are not expected.
pub fn sorted<T: Float>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(total_cmp);
    v
}

/// 1-based nearest rank for quantile `p` over `n` values.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    assert!(n > 0, "nearest_rank over empty input");
    assert!((0.0..=1.0).contains(&p), "quantile out of range: {p}");
    // Scale to an integer numerator to avoid ceil(0.95 * 20) = 20.000000000000004 -> 21.
    let scaled = (p * 1_000_000.0).round() as u128;
    let rank = (scaled * n as u128).div_ceil(1_000_000) as usize;
    rank.clamp(1, n)
}

/// Nearest-rank quantile of already sorted values.
pub fn quantile_sorted<T: Float>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[nearest_rank(p, sorted.len()) - 1])
}

/// Conventional median. `None` for empty input.
pub fn median<T: Float>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let s = sorted(values);
    let n = s.len();
    let two = T::one() + T::one();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / two
    })
}

/// Median absolute deviation around the median.
pub fn mad<T: Float>(values: &[T]) -> Option<T> {
    let m = median(values)?;
    let dev: Vec<T> = values.iter().map(|&x| (x - m).abs()).collect();
    median(&dev)
}

/// Summary statistics over a baseline window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineStats<T> {
    pub n: usize,
    pub median: T,
    pub mad: T,
}

/// Minimum number of observations for a baseline to be defined.
pub const MIN_BASELINE: usize = 5;

impl<T: Float> BaselineStats<T> {
    /// `None` when fewer than [`MIN_BASELINE`] values are given.
    pub fn from_values(values: &[T]) -> Option<Self> {
        if values.len() < MIN_BASELINE {
            return None;
        }
        Some(Self {
            n: values.len(),
            median: median(values)?,
            mad: mad(values)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_examples() {
        assert_eq!(nearest_rank(0.5, 1), 1);
        assert_eq!(nearest_rank(0.5, 10), 5);
        assert_eq!(nearest_rank(0.5, 11), 6);
        assert_eq!(nearest_rank(0.95, 20), 19);
        assert_eq!(nearest_rank(0.95, 100), 95);
        assert_eq!(nearest_rank(0.0, 7), 1);
        assert_eq!(nearest_rank(1.0, 7), 7);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0f32, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn mad_of_constant_is_zero() {
        let v = [0.001; 20];
        assert_eq!(mad(&v), Some(0.0));
    }

    #[test]
    fn baseline_requires_five() {
        assert!(BaselineStats::from_values(&[1.0, 2.0, 3.0, 4.0]).is_none());
        let b = BaselineStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.median, 3.0);
        assert_eq!(b.mad, 1.0);
    }

    proptest! {
        // Nearest rank is the smallest rank r with r/n >= p.
        #[test]
        fn nearest_rank_is_minimal(n in 1usize..500, pi in 0u32..=100) {
            let p = pi as f64 / 100.0;
            let r = nearest_rank(p, n);
            let count_ok = |r: usize| (r as u128) * 100 >= (pi as u128) * (n as u128);
            prop_assert!(count_ok(r) || r == 1);
            prop_assert!(r == 1 || !count_ok(r - 1));
        }
    }
}
