//! Order-canonical floating-point reduction.
//!
//! Reductions over the spatial axis (softmax denominators, glimpse sums,
//! spatial means) must give bit-identical results when the locations are
//! permuted. Sorting the addends into a canonical order before folding makes
//! the rounding sequence independent of input order; ascending-magnitude
//! summation also happens to be the more accurate order.

use super::Real;

/// Sum `terms` in a canonical order. The buffer is consumed as scratch.
/// NaN sorts via the IEEE total order and propagates into the result, so
/// poisoned values surface as a non-finite sum rather than a panic here.
pub fn canonical_sum<T: Real>(terms: &mut [T]) -> T {
    // Ties between equal values are interchangeable and a +0.0 accumulator
    // start makes signed zeros order-insensitive too.
    terms.sort_unstable_by(|a, b| a.to_f64s().total_cmp(&b.to_f64s()));
    let mut acc = T::zero();
    for &t in terms.iter() {
        acc = acc + t;
    }
    acc
}
