use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Layer normalization over the last axis, with optional affine parameters.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = *x.shape().last().ok_or_else(|| Error::invalid_shape("layer_norm", "rank 0 input"))?;
    for p in [gamma, beta].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), p.shape()));
        }
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let rows = x.numel() / d;
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    let mut y = xhat.clone();
    if gamma.is_some() || beta.is_some() {
        for row in y.chunks_mut(d) {
            for (i, v) in row.iter_mut().enumerate() {
                if let Some(g) = gamma {
                    *v *= g.data()[i];
                }
                if let Some(b) = beta {
                    *v += b.data()[i];
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), y)?, NormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: Option<&Tensor<T>>,
    dy: &Tensor<T>,
    dgamma: Option<&mut Tensor<T>>,
    dbeta: Option<&mut Tensor<T>>,
) -> Result<Tensor<T>> {
    if dy.numel() != cache.xhat.len() {
        return Err(Error::shape("layer_norm_backward", dy.shape(), &[cache.xhat.len()]));
    }
    let d = *dy.shape().last().unwrap();
    let inv_d = T::one() / T::lit(d as f64);
    if let Some(dg) = dgamma {
        for (row, xh) in dy.data().chunks(d).zip(cache.xhat.chunks(d)) {
            for i in 0..d {
                dg.data_mut()[i] += row[i] * xh[i];
            }
        }
    }
    if let Some(db) = dbeta {
        for row in dy.data().chunks(d) {
            for i in 0..d {
                db.data_mut()[i] += row[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    let mut g = vec![T::zero(); d];
    for (r, row) in dy.data().chunks(d).enumerate() {
        for i in 0..d {
            g[i] = match gamma {
                Some(gm) => row[i] * gm.data()[i],
                None => row[i],
            };
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mean_g = g.iter().copied().sum::<T>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rs * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
    Tensor::from_vec(dy.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_row_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 7], 3.25);
        let (y, _) = layer_norm(&x, None, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_have_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (y, _) = layer_norm(&x, None, None).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
