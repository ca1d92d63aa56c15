//! Central-difference gradient estimates, used as an oracle for `backward`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] between two gradient buffers.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// Estimates `∂f/∂t` elementwise as `(f(t + h·eᵢ) − f(t − h·eᵢ)) / 2h`.
pub fn finite_difference_grad<F>(mut f: F, t: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = t.clone();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("finite difference at element {i}")));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(t.shape(), out)
}
