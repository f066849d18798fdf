//! Rotary positional embedding over (frame, row, column) with a separate
//! head-dim segment per axis. In `Zero` temporal mode the frame segment is
//! never rotated, so attention cannot see frame order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalRope {
    Zero,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeConfig {
    /// Head-dim widths `(d_t, d_h, d_w)`.
    pub split: [usize; 3],
    pub temporal: TemporalRope,
    pub base: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            split: [8, 12, 12],
            temporal: TemporalRope::Zero,
            base: 10000.0,
        }
    }
}

impl RopeConfig {
    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.split.iter().any(|d| d % 2 != 0) {
            return Err(Error::config("rope.split", format!("segment widths must be even, got {:?}", self.split)));
        }
        if self.split.iter().sum::<usize>() != head_dim {
            return Err(Error::config(
                "rope.split",
                format!("{:?} does not sum to head_dim {head_dim}", self.split),
            ));
        }
        if !(self.base > 1.0) {
            return Err(Error::config("rope.base", "must exceed 1"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.split.iter().sum()
    }
}

/// Per-token `(cos, sin)` for each rotated pair, `[n, head_dim / 2]` each.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pairs: usize,
}

impl RopeTable {
    pub fn new(cfg: &RopeConfig, positions: &[[usize; 3]]) -> Self {
        let pairs = cfg.head_dim() / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for (axis, &width) in cfg.split.iter().enumerate() {
                let p = if axis == 0 && cfg.temporal == TemporalRope::Zero {
                    0.0
                } else {
                    pos[axis] as f64
                };
                for i in 0..width / 2 {
                    let theta = cfg.base.powf(-2.0 * i as f64 / width as f64);
                    let a = p * theta;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        Self { cos, sin, pairs }
    }

    /// Rotates rows of `x` (`[n, head_dim]`, row-major in a buffer with row
    /// stride `stride` starting at `offset`). `inverse` applies the
    /// transpose rotation, which is the backward pass.
    pub(crate) fn apply<T: Real>(&self, x: &mut [T], n: usize, stride: usize, offset: usize, inverse: bool) {
        for r in 0..n {
            let row = &mut x[r * stride + offset..r * stride + offset + 2 * self.pairs];
            for i in 0..self.pairs {
                let c = T::lit(self.cos[r * self.pairs + i]);
                let s = T::lit(self.sin[r * self.pairs + i]);
                let s = if inverse { -s } else { s };
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates each row of `x: [n, head_dim]` by its token position.
pub fn rope_rotate<T: Real>(x: &Tensor<T>, positions: &[[usize; 3]], cfg: &RopeConfig) -> Result<Tensor<T>> {
    let d = cfg.head_dim();
    cfg.validate(d)?;
    if x.rank() != 2 || x.dim(1) != d || x.dim(0) != positions.len() {
        return Err(Error::shape("rope_rotate", x.shape(), &[positions.len(), d]));
    }
    let table = RopeTable::new(cfg, positions);
    let mut out = x.clone();
    table.apply(out.data_mut(), positions.len(), d, 0, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_temporal_ignores_frame_index() {
        let x = Tensor::<f64>::randn(&[2, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::concat(0, &[&x.narrow(0, 0, 1).unwrap(), &x.narrow(0, 0, 1).unwrap()]).unwrap();
        let y = rope_rotate(&x, &[[0, 2, 3], [7, 2, 3]], &RopeConfig::default()).unwrap();
        assert_eq!(y.data()[..32], y.data()[32..]);

        let std_cfg = RopeConfig {
            temporal: TemporalRope::Standard,
            ..RopeConfig::default()
        };
        let y = rope_rotate(&x, &[[0, 2, 3], [7, 2, 3]], &std_cfg).unwrap();
        assert_ne!(y.data()[..32], y.data()[32..]);
    }

    #[test]
    fn inner_products_depend_on_offsets_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 32], 1.0, &mut rng);
        let cfg = RopeConfig {
            temporal: TemporalRope::Standard,
            ..RopeConfig::default()
        };
        let (p1, p2, s) = ([1, 4, 2], [3, 0, 5], [2, 3, 1]);
        let shift = |p: [usize; 3]| [p[0] + s[0], p[1] + s[1], p[2] + s[2]];
        let a = dot(rope_rotate(&q, &[p1], &cfg).unwrap().data(), rope_rotate(&k, &[p2], &cfg).unwrap().data());
        let b = dot(
            rope_rotate(&q, &[shift(p1)], &cfg).unwrap().data(),
            rope_rotate(&k, &[shift(p2)], &cfg).unwrap().data(),
        );
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn odd_segment_rejected() {
        let cfg = RopeConfig {
            split: [7, 13, 12],
            ..RopeConfig::default()
        };
        assert!(matches!(cfg.validate(32), Err(Error::Config { .. })));
    }
}
