//! Order-invariant floating-point accumulation.
//!
//! Several contracts in this crate promise bit-identical results under a
//! permutation of the batch: the context sums behind the soft Jaccard
//! distance, loss averaging, and the mean of per-query average precision.
//! Plain left-to-right f64 addition is not associative, so those sums go
//! through [`exact_sum`], which accumulates a sum exactly and rounds once at
//! the end. The result is the f64 nearest the exact real-valued sum and
//! therefore does not depend on input order.

/// Sums `values` exactly, rounding only once at the end.
///
/// This is Shewchuk's growing-expansion algorithm with a correctly-rounded
/// final collapse: the running sum is kept as a list of non-overlapping
/// partials whose exact sum equals the exact sum of all inputs seen so far.
/// Inputs must be finite; non-finite values poison the result.
///
/// ```
/// use dca_metric::exact_sum;
/// assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
/// assert_eq!(exact_sum(std::iter::repeat(0.1).take(10)), 1.0);
/// ```
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for value in values {
        let mut x = value;
        let mut used = 0;
        for slot in 0..partials.len() {
            let mut y = partials[slot];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            // Two-sum: hi + lo == x + y exactly, given |x| >= |y|.
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[used] = lo;
                used += 1;
            }
            x = hi;
        }
        partials.truncate(used);
        partials.push(x);
    }

    // Collapse from the largest partial down, stopping at the first inexact
    // addition; a half-ulp tail then needs a round-to-even correction based
    // on the sign of the next partial below it.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut total = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = total;
        n -= 1;
        let y = partials[n];
        total = x + y;
        let rounded = total - x;
        lo = y - rounded;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = total + y;
        if y == x - total {
            total = x;
        }
    }
    total
}

/// Arithmetic mean computed with [`exact_sum`]; `0.0` for an empty input.
pub fn exact_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let collected: Vec<f64> = values.into_iter().collect();
    if collected.is_empty() {
        return 0.0;
    }
    let count = collected.len() as f64;
    exact_sum(collected) / count
}
