//! Central-difference gradient oracle.
//!
//! Independent of the tape on purpose: every backward pass in this crate is
//! ultimately validated against [`finite_diff_grad`].

use crate::error::{CemError, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Central-difference estimate of `d f / d x` per coordinate:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F, E>(f: E, x: &Tensor<F>, h: F) -> Result<Tensor<F>>
where
    F: Scalar,
    E: Fn(&Tensor<F>) -> Result<F>,
{
    if h <= F::zero() {
        return Err(CemError::contract("finite_diff_grad: h must be positive"));
    }
    let two = F::from_f64(2.0).unwrap();
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let plus = f(&probe)?;
        probe.values[i] = orig - h;
        let minus = f(&probe)?;
        probe.values[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CemError::NonFiniteProbe { coord: i });
        }
        grad.push((plus - minus) / (two * h));
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Max over coordinates of `|a−b| / max(1, |a|, |b|)`.
pub fn max_rel_err<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel err on mismatched lengths");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let denom = 1.0f64.max(x.abs()).max(y.abs());
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Max over coordinates of `|a−b|`.
pub fn max_abs_err<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len(), "abs err on mismatched lengths");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
