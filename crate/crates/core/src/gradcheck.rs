//! Central finite-difference checking of analytic gradients.
//!
//! Used by unit tests and the acceptance suite. The numeric side only ever
//! evaluates forward passes, so it is independent of the reverse-mode code
//! it checks.

use crate::tensor::Tensor;

/// Relative error with a floor on the denominator so that two tiny values
/// compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for each index in
/// `indices`.
pub fn central_differences(
    x: &Tensor<f64>,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between `analytic[indices]` and the central
/// differences of `f` at `x`.
pub fn max_relative_error(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    indices: &[usize],
    h: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let numeric = central_differences(x, indices, h, f);
    indices
        .iter()
        .zip(numeric)
        .map(|(&i, n)| relative_error(analytic.data()[i], n))
        .fold(0.0, f64::max)
}

/// Up to `count` indices spread evenly over `0..len`.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count + (len / count) / 2).collect()
}
