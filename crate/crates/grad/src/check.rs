//! Finite-difference helpers for verifying analytic gradients.

use crate::tensor::{Scalar, Tensor};

/// Central difference of `f` w.r.t. element `index` of `x`.
pub fn central_difference<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, index: usize, eps: T) -> T {
    let mut probe = x.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + eps;
    let up = f(&probe);
    probe.data_mut()[index] = orig - eps;
    let down = f(&probe);
    (up - down) / (eps + eps)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
