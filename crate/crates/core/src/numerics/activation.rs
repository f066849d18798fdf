use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(GELU_C);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("gelu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_vec(x.shape(), data)
}
