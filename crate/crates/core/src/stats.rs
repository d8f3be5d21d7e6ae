//! Scalar-generic estimators: entropy, histogram mutual information,
//! empirical quantiles and goodness-of-fit helpers.
//!
//! Everything here is written against [`Scalar`] so the same code runs on
//! `f32` and `f64`; the crate root fixes `f64` through type aliases.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::{Error, Result};

/// Floating-point type usable by the estimators.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion")
    }

    fn count(n: u64) -> Self {
        Self::from_u64(n).expect("scalar conversion")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {}

/// Plug-in (maximum-likelihood) Shannon entropy in bits of a count vector.
pub fn entropy_from_counts<F: Scalar>(counts: impl IntoIterator<Item = u64>) -> F {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return F::zero();
    }
    let n = F::count(total);
    let h = counts
        .iter()
        .map(|&c| {
            let p = F::count(c) / n;
            -p * p.log2()
        })
        .sum::<F>();
    h.max(F::zero())
}

/// Plug-in entropy of the empirical distribution of `labels`.
pub fn plugin_entropy<F: Scalar, T: Ord>(labels: impl IntoIterator<Item = T>) -> F {
    let mut counts: BTreeMap<T, u64> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    entropy_from_counts(counts.into_values())
}

/// Miller–Madow corrected entropy in bits: plug-in plus `(m - 1) / (2 n ln 2)`
/// where `m` is the number of occupied cells.
pub fn miller_madow_entropy<F: Scalar>(counts: &[u64]) -> F {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return F::zero();
    }
    let occupied = counts.iter().filter(|&&c| c > 0).count() as u64;
    let plug: F = entropy_from_counts(counts.iter().copied());
    let correction =
        F::count(occupied.saturating_sub(1)) / (F::of(2.0) * F::count(total) * F::of(2.0).ln());
    plug + correction
}

/// Equal-width histogram over a closed range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<F> {
    lo: F,
    width: F,
    bins: usize,
}

impl<F: Scalar> Histogram<F> {
    /// Spans `[min, max]` of `values`. A degenerate range puts everything
    /// in bin 0.
    pub fn spanning(values: impl IntoIterator<Item = F>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
        }
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        let mut any = false;
        for v in values {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite sample {v:?}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
            any = true;
        }
        if !any {
            return Err(Error::Empty("histogram samples"));
        }
        let width = (hi - lo) / F::count(bins as u64);
        Ok(Self { lo, width, bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin(&self, v: F) -> usize {
        if self.width <= F::zero() {
            return 0;
        }
        let idx = ((v - self.lo) / self.width).floor().to_usize().unwrap_or(0);
        idx.min(self.bins - 1)
    }
}

/// Histogram mutual information, in bits, between a sample value and the
/// binary label saying which of `a` or `b` it came from.
///
/// Marginal and joint entropies are Miller–Madow corrected; the result is
/// clamped to `[0, 1]`.
pub fn labelled_mutual_information<F: Scalar>(a: &[F], b: &[F], bins: usize) -> Result<F> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mutual information samples"));
    }
    let hist = Histogram::spanning(a.iter().chain(b.iter()).copied(), bins)?;
    let mut joint = vec![0u64; bins * 2];
    for &v in a {
        joint[hist.bin(v) * 2] += 1;
    }
    for &v in b {
        joint[hist.bin(v) * 2 + 1] += 1;
    }
    let marginal_x: Vec<u64> = joint.chunks(2).map(|c| c[0] + c[1]).collect();
    let marginal_y = [a.len() as u64, b.len() as u64];
    let hx: F = miller_madow_entropy(&marginal_x);
    let hy: F = miller_madow_entropy(&marginal_y);
    let hxy: F = miller_madow_entropy(&joint);
    let mi = hx + hy - hxy;
    Ok(mi.max(F::zero()).min(F::one()))
}

/// Nearest-rank empirical quantile: the smallest sample such that at least
/// a fraction `p` of the samples are `<=` it.
pub fn quantile<T: Copy + PartialOrd, F: Scalar>(samples: &[T], p: F) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Empty("quantile samples"));
    }
    if !(p > F::zero() && p <= F::one()) {
        return Err(Error::InvalidConfig(format!("quantile {p:?} outside (0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("comparable samples"));
    let n = sorted.len();
    let rank = (p * F::count(n as u64)).ceil().to_usize().unwrap_or(n).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Pearson chi-square statistic of `counts` against a uniform expectation.
pub fn chi_square_uniform<F: Scalar>(counts: &[u64]) -> F {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return F::zero();
    }
    let expected = F::count(total) / F::count(counts.len() as u64);
    counts
        .iter()
        .map(|&c| {
            let d = F::count(c) - expected;
            d * d / expected
        })
        .sum()
}

/// Arithmetic mean, `None` when empty.
pub fn mean<F: Scalar>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().copied().sum::<F>() / F::count(values.len() as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_of_constant_labels_is_zero() {
        let h: f64 = plugin_entropy(std::iter::repeat_n("x", 100));
        assert_eq!(h, 0.0);
    }

    #[test]
    fn skewed_two_label_entropy() {
        // Analytic value of H(0.9, 0.1).
        let oracle = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
        let h: f64 = entropy_from_counts([900, 100]);
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.469).abs() < 5e-4);
    }

    #[test]
    fn entropy_works_in_f32() {
        let h: f32 = entropy_from_counts([1, 1, 1, 1]);
        assert!((h - 2.0).abs() < 1e-6);
    }

    #[test]
    fn quantile_nearest_rank() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(quantile(&s, 0.99f64).unwrap(), 99);
        assert_eq!(quantile(&s, 1.0f64).unwrap(), 100);
        assert_eq!(quantile(&s, 0.5f64).unwrap(), 50);
        assert_eq!(quantile(&[7u64; 10], 0.99f64).unwrap(), 7);
        assert!(quantile::<u64, f64>(&[], 0.5).is_err());
        assert!(quantile(&s, 0.0f64).is_err());
    }

    #[test]
    fn histogram_clamps_maximum_into_last_bin() {
        let h = Histogram::spanning([0.0f64, 10.0], 4).unwrap();
        assert_eq!(h.bin(0.0), 0);
        assert_eq!(h.bin(10.0), 3);
        assert_eq!(h.bin(5.0), 2);
        let flat = Histogram::spanning([3.0f64, 3.0], 8).unwrap();
        assert_eq!(flat.bin(3.0), 0);
    }

    #[test]
    fn mi_of_disjoint_supports_is_one_bit() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b: Vec<f64> = (0..1000).map(|i| 5.0 + i as f64 / 1000.0).collect();
        let mi = labelled_mutual_information(&a, &b, 32).unwrap();
        assert!((mi - 1.0).abs() < 0.01, "mi = {mi}");
    }

    #[test]
    fn mi_of_identical_samples_is_near_zero() {
        let a: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let mi = labelled_mutual_information(&a, &a, 32).unwrap();
        assert!(mi < 1e-9, "mi = {mi}");
    }

    proptest! {
        #[test]
        fn mi_symmetric_and_non_negative(
            a in prop::collection::vec(0.0f64..100.0, 1000..1200),
            b in prop::collection::vec(0.0f64..100.0, 1000..1200),
            bins in 2usize..64,
        ) {
            let ab = labelled_mutual_information(&a, &b, bins).unwrap();
            let ba = labelled_mutual_information(&b, &a, bins).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounded_by_log_cardinality(labels in prop::collection::vec(0u8..16, 1..500)) {
            let h: f64 = plugin_entropy(labels.iter().copied());
            let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (distinct as f64).log2() + 1e-9);
        }
    }
}
