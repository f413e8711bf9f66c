//! Sample quantiles by linear interpolation between order statistics
//! (the "type 7" rule: `h = (n − 1) q + 1`).

use crate::num::Scalar;

/// One-based ranks bracketing the `q`-th quantile of `n` values and the
/// interpolation weight on the upper one.
///
/// Panics unless `n ≥ 1` and `0 ≤ q ≤ 1`.
pub fn quantile_ranks<T: Scalar>(n: usize, q: T) -> (usize, usize, T) {
    assert!(n >= 1, "quantile of an empty sample");
    assert!(q >= T::zero() && q <= T::one(), "quantile level outside [0, 1]");
    let h = T::of_usize(n - 1) * q + T::one();
    let lo = h.floor();
    let hi = h.ceil();
    let lo_rank = lo.to_usize().unwrap_or(1).clamp(1, n);
    let hi_rank = hi.to_usize().unwrap_or(n).clamp(1, n);
    (lo_rank, hi_rank, h - lo)
}

/// `x_lo + w (x_hi − x_lo)`.
#[inline]
pub fn interpolate<T: Scalar>(x_lo: T, x_hi: T, weight: T) -> T {
    x_lo + weight * (x_hi - x_lo)
}

/// Quantile of an ascending-sorted slice.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: T) -> T {
    let (lo, hi, w) = quantile_ranks(sorted.len(), q);
    interpolate(sorted[lo - 1], sorted[hi - 1], w)
}

/// Quantile of an unsorted slice (sorts a copy).
pub fn quantile<T: Scalar>(values: &[T], q: T) -> T {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    quantile_sorted(&v, q)
}
