//! Exact scaled dot-product attention for a single head.

use std::cmp::Ordering;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Reduction order used by the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// GEMM-backed; summation order follows key position.
    #[default]
    Fast,
    /// Every key-axis sum is taken in an order determined by the key and
    /// value rows themselves, so permuting keys (with their values) leaves
    /// each output row bit-identical.
    Canonical,
}

/// Softmax probabilities `[n, m]` kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub probs: Vec<T>,
}

fn check<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::invalid_shape("attention", "q, k, v must be rank 2"));
    }
    if q.dim(1) != k.dim(1) {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if k.dim(0) != v.dim(0) {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok((q.dim(0), k.dim(0), q.dim(1), v.dim(1)))
}

fn cmp_rows<T: Real>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.as_f64().total_cmp(&y.as_f64());
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// `softmax(q k^T / sqrt(d)) v` with `q: [n, d]`, `k: [m, d]`, `v: [m, dv]`.
pub fn softmax_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mode: Reduction,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (n, m, d, dv) = check(q, k, v)?;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut probs = vec![T::zero(); n * m];
    let mut y = vec![T::zero(); n * dv];
    match mode {
        Reduction::Fast => {
            gemm(n, d, m, scale, q.data(), false, k.data(), true, T::zero(), &mut probs);
            for row in probs.chunks_mut(m) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                    s += *e;
                }
                let inv = T::one() / s;
                for e in row.iter_mut() {
                    *e *= inv;
                }
            }
            gemm(n, m, dv, T::one(), &probs, false, v.data(), false, T::zero(), &mut y);
        }
        Reduction::Canonical => {
            // Keys sorted by their own (key, value) rows. Rows that tie are
            // identical and contribute identically.
            let krow = |j: usize| &k.data()[j * d..(j + 1) * d];
            let vrow = |j: usize| &v.data()[j * dv..(j + 1) * dv];
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_unstable_by(|&a, &b| cmp_rows(krow(a), krow(b)).then_with(|| cmp_rows(vrow(a), vrow(b))));
            for i in 0..n {
                let qi = &q.data()[i * d..(i + 1) * d];
                let row = &mut probs[i * m..(i + 1) * m];
                for (j, e) in row.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(krow(j)) {
                        acc += a * b;
                    }
                    *e = acc * scale;
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                }
                let mut s = T::zero();
                for &j in &order {
                    s += row[j];
                }
                for e in row.iter_mut() {
                    *e /= s;
                }
                let yi = &mut y[i * dv..(i + 1) * dv];
                for &j in &order {
                    let p = row[j];
                    for (o, &vv) in yi.iter_mut().zip(&v.data()[j * dv..(j + 1) * dv]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, dv], y)?, AttentionCache { probs }))
}

/// Gradients `(dq, dk, dv)` of [`softmax_attention`].
pub fn softmax_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, m, d, dv) = check(q, k, v)?;
    if dy.shape() != [n, dv] {
        return Err(Error::shape("attention_backward", dy.shape(), &[n, dv]));
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let p = &cache.probs;
    // dV = P^T dY
    let mut dvv = vec![T::zero(); m * dv];
    gemm(m, n, dv, T::one(), p, true, dy.data(), false, T::zero(), &mut dvv);
    // dP = dY V^T
    let mut ds = vec![T::zero(); n * m];
    gemm(n, dv, m, T::one(), dy.data(), false, v.data(), true, T::zero(), &mut ds);
    for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
        for (g, &pp) in drow.iter_mut().zip(prow) {
            *g = pp * (*g - dot);
        }
    }
    let mut dq = vec![T::zero(); n * d];
    gemm(n, m, d, scale, &ds, false, k.data(), false, T::zero(), &mut dq);
    let mut dk = vec![T::zero(); m * d];
    gemm(m, n, d, scale, &ds, true, q.data(), false, T::zero(), &mut dk);
    Ok((
        Tensor::from_vec(&[n, d], dq)?,
        Tensor::from_vec(&[m, d], dk)?,
        Tensor::from_vec(&[m, dv], dvv)?,
    ))
}
