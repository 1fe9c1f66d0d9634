//! Finite-difference gradient verification.
//!
//! Central differences have second-order truncation error, so with epsilon
//! around 1e-5 a correct analytic gradient agrees to roughly 1e-10 in
//! absolute terms. The relative-error metric used throughout is
//! `|analytic - numeric| / max(1, |numeric|)`, which behaves sanely when the
//! true gradient is near zero.

use ndarray::{Array1, Array2};

/// A differentiable scalar loss over a matrix of model outputs.
///
/// `grad` must return dL/dY with the same shape as `y`. Implementations are
/// deliberately simple closed forms (squared error, sums) so finite
/// differences have an exact target to disagree with.
pub trait MatrixLoss {
    fn value(&self, y: &Array2<f64>) -> f64;
    fn grad(&self, y: &Array2<f64>) -> Array2<f64>;
}

/// `0.5 * sum((y - target)^2)`, the workhorse check loss. Gradient `y - target`.
pub struct SquaredError {
    pub target: Array2<f64>,
}

impl MatrixLoss for SquaredError {
    fn value(&self, y: &Array2<f64>) -> f64 {
        y.iter()
            .zip(self.target.iter())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum()
    }

    fn grad(&self, y: &Array2<f64>) -> Array2<f64> {
        y - &self.target
    }
}

/// `sum(y)`. Gradient is all ones; useful for closed-form bias checks.
pub struct SumLoss;

impl MatrixLoss for SumLoss {
    fn value(&self, y: &Array2<f64>) -> f64 {
        y.sum()
    }

    fn grad(&self, y: &Array2<f64>) -> Array2<f64> {
        Array2::ones(y.raw_dim())
    }
}

/// Constant zero. Gradient zero; a correct checker reports error 0 exactly.
pub struct ZeroLoss;

impl MatrixLoss for ZeroLoss {
    fn value(&self, _y: &Array2<f64>) -> f64 {
        0.0
    }

    fn grad(&self, y: &Array2<f64>) -> Array2<f64> {
        Array2::zeros(y.raw_dim())
    }
}

/// Central-difference gradient of `f` with respect to every entry of
/// `params`, evaluated at the current values. `params` is restored exactly
/// before returning.
pub fn numeric_gradient_matrix<F>(params: &mut Array2<f64>, mut f: F, epsilon: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let dim = params.raw_dim();
    let mut grad = Array2::zeros(dim);
    for i in 0..params.nrows() {
        for j in 0..params.ncols() {
            let saved = params[[i, j]];
            params[[i, j]] = saved + epsilon;
            let plus = f(params);
            params[[i, j]] = saved - epsilon;
            let minus = f(params);
            params[[i, j]] = saved;
            grad[[i, j]] = (plus - minus) / (2.0 * epsilon);
        }
    }
    grad
}

/// Vector counterpart of [`numeric_gradient_matrix`].
pub fn numeric_gradient_vector<F>(params: &mut Array1<f64>, mut f: F, epsilon: f64) -> Array1<f64>
where
    F: FnMut(&Array1<f64>) -> f64,
{
    let mut grad = Array1::zeros(params.len());
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + epsilon;
        let plus = f(params);
        params[i] = saved - epsilon;
        let minus = f(params);
        params[i] = saved;
        grad[i] = (plus - minus) / (2.0 * epsilon);
    }
    grad
}

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` over paired entries.
/// Returns 0.0 for empty input. Panics if lengths differ.
pub fn max_relative_error<'a, A, N>(analytic: A, numeric: N) -> f64
where
    A: IntoIterator<Item = &'a f64>,
    N: IntoIterator<Item = &'a f64>,
{
    let mut analytic = analytic.into_iter();
    let mut numeric = numeric.into_iter();
    let mut worst = 0.0f64;
    loop {
        match (analytic.next(), numeric.next()) {
            (Some(a), Some(n)) => {
                let err = (a - n).abs() / n.abs().max(1.0);
                worst = worst.max(err);
            }
            (None, None) => return worst,
            _ => panic!("gradient lists have different lengths"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn central_difference_matches_quadratic_derivative() {
        // f(x) = sum(x^2) has gradient 2x.
        let mut params = array![[1.0, -2.0], [0.5, 3.0]];
        let grad = numeric_gradient_matrix(&mut params, |p| p.iter().map(|v| v * v).sum(), 1e-5);
        let expected = array![[2.0, -4.0], [1.0, 6.0]];
        assert!(max_relative_error(expected.iter(), grad.iter()) < 1e-9);
        assert_eq!(params, array![[1.0, -2.0], [0.5, 3.0]]);
    }

    #[test]
    fn vector_variant_matches_cubic_derivative() {
        let mut params = array![0.3, -0.7, 1.1];
        let grad = numeric_gradient_vector(&mut params, |p| p.iter().map(|v| v * v * v).sum(), 1e-5);
        for (g, v) in grad.iter().zip([0.3f64, -0.7, 1.1]) {
            assert!((g - 3.0 * v * v).abs() < 1e-8);
        }
    }

    #[test]
    fn squared_error_gradient_is_residual() {
        let loss = SquaredError { target: array![[1.0, 2.0]] };
        let y = array![[3.0, 1.0]];
        assert_eq!(loss.grad(&y), array![[2.0, -1.0]]);
        assert_eq!(loss.value(&y), 0.5 * (4.0 + 1.0));
    }

    #[test]
    fn relative_error_uses_unit_floor_near_zero() {
        // Denominator is max(1, |numeric|), so tiny numeric values do not
        // blow the ratio up.
        assert_eq!(max_relative_error([&1e-6f64], [&0.0f64]), 1e-6);
        assert_eq!(max_relative_error([&4.0f64], [&2.0f64]), 1.0);
        assert_eq!(max_relative_error(Vec::<&f64>::new(), Vec::<&f64>::new()), 0.0);
    }
}
