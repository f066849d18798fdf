use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Flow time is multiplied by this before the sinusoidal features.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal embedding `[sin(s t w_i), cos(s t w_i)]`, `w_i = 10000^(-i/half)`.
pub fn embedding_timestep<T: Real>(t: f64, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config("time_freq_dim", format!("must be positive and even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|w| T::lit((TIME_SCALE * t * w).sin())));
    out.extend(freqs.iter().map(|w| T::lit((TIME_SCALE * t * w).cos())));
    Tensor::from_vec(&[dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        let e = embedding_timestep::<f64>(0.0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(embedding_timestep::<f32>(0.5, 7).is_err());
    }
}
