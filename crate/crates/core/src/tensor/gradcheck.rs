use super::Tensor;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely in [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_grad<F>(mut f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {step}")));
    }
    let mut x = at.clone();
    let mut grad = vec![0.0; at.numel()];
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = f(&x)?;
        x.data_mut()[i] = orig - step;
        let minus = f(&x)?;
        x.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteAt { index: i });
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(at.shape(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
