use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

fn rows_of<T: Copy>(x: &Tensor<T>, in_dim: usize, op: &'static str, w_shape: &[usize]) -> Result<usize> {
    if x.rank() == 0 || *x.shape().last().unwrap() != in_dim {
        return Err(Error::shape(op, x.shape(), w_shape));
    }
    Ok(x.numel() / in_dim)
}

/// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::invalid_shape("linear", format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (out, inp) = (w.dim(0), w.dim(1));
    let n = rows_of(x, inp, "linear", w.shape())?;
    let mut y = vec![T::zero(); n * out];
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(Error::shape("linear bias", b.shape(), &[out]));
        }
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(n, inp, out, T::one(), x.data(), false, w.data(), true, beta, &mut y);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::from_vec(&shape, y)
}

/// Backward of [`linear`]. Weight and bias gradients are accumulated into
/// `dw` / `db` when given; `dx` is returned when `need_dx`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: Option<&mut Tensor<T>>,
    db: Option<&mut Tensor<T>>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (out, inp) = (w.dim(0), w.dim(1));
    let n = rows_of(x, inp, "linear_backward", w.shape())?;
    if dy.numel() != n * out || *dy.shape().last().unwrap_or(&0) != out {
        return Err(Error::shape("linear_backward", dy.shape(), &[n, out]));
    }
    if let Some(dw) = dw {
        if dw.shape() != w.shape() {
            return Err(Error::shape("linear_backward dw", dw.shape(), w.shape()));
        }
        // dW += dy^T x
        gemm(out, n, inp, T::one(), dy.data(), true, x.data(), false, T::one(), dw.data_mut());
    }
    if let Some(db) = db {
        let acc = db.data_mut();
        for row in dy.data().chunks(out) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); n * inp];
    gemm(n, out, inp, T::one(), dy.data(), false, w.data(), false, T::zero(), &mut dx);
    Ok(Some(Tensor::from_vec(x.shape(), dx)?))
}
