use super::{Real, Tensor4};
use crate::error::Result;

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the pre-activation is strictly positive.
pub fn relu_backward<T: Real>(grad: &Tensor4<T>, pre: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad.zip_map(pre, |g, z| if z > T::zero() { g } else { T::zero() })
}

pub fn tanh_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.tanh())
}

/// Uses the forward output: `d tanh = 1 - y²`.
pub fn tanh_backward<T: Real>(grad: &Tensor4<T>, out: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad.zip_map(out, |g, y| g * (T::one() - y * y))
}
