//! Conditioning bundle, channel concatenation and (un)patchifying.

use crate::error::{Error, Result};
use crate::geometry::Frame;
use crate::numerics::{Real, Tensor};

/// Everything the denoiser is conditioned on, laid out over `F` frames
/// (inputs first, then targets).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    /// Clean context latents with target placeholders, `[d_z, F, h, w]`.
    pub latents: Tensor<T>,
    /// 1 on input frames, 0 on target frames, `[1, F, h, w]`.
    pub mask: Tensor<T>,
    /// Ray-map channels, `[C_r, F, h, w]`.
    pub rays: Tensor<T>,
    pub ray_frame: Frame,
    is_input: Vec<bool>,
}

impl<T: Real> ConditionBundle<T> {
    pub fn new(latents: Tensor<T>, is_input: Vec<bool>, rays: Tensor<T>, ray_frame: Frame) -> Result<Self> {
        let (f, h, w) = match latents.shape() {
            [_, f, h, w] => (*f, *h, *w),
            s => return Err(Error::invalid_shape("condition latents", format!("{s:?}"))),
        };
        if is_input.len() != f {
            return Err(Error::shape("condition mask", &[is_input.len()], &[f]));
        }
        if rays.rank() != 4 || rays.shape()[1..] != latents.shape()[1..] {
            return Err(Error::shape("condition rays", rays.shape(), latents.shape()));
        }
        if !is_input.iter().any(|&b| !b) {
            return Err(Error::Invalid("condition has no target frame".into()));
        }
        let plane = h * w;
        let mut mask = Vec::with_capacity(f * plane);
        for &inp in &is_input {
            mask.extend(std::iter::repeat_n(if inp { T::one() } else { T::zero() }, plane));
        }
        Ok(Self {
            mask: Tensor::from_vec(&[1, f, h, w], mask)?,
            latents,
            rays,
            ray_frame,
            is_input,
        })
    }

    pub fn frames(&self) -> usize {
        self.is_input.len()
    }

    pub fn is_input(&self) -> &[bool] {
        &self.is_input
    }

    pub fn target_frames(&self) -> Vec<usize> {
        (0..self.frames()).filter(|&i| !self.is_input[i]).collect()
    }

    /// Reorders frames (latents, mask and rays together).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            self.latents.gather(1, order)?,
            order.iter().map(|&i| self.is_input[i]).collect(),
            self.rays.gather(1, order)?,
            self.ray_frame,
        )
    }
}

/// `[z_t; latents; mask; rays]` along channels.
pub fn build_input<T: Real>(z_t: &Tensor<T>, cond: &ConditionBundle<T>) -> Result<Tensor<T>> {
    if z_t.shape() != cond.latents.shape() {
        return Err(Error::shape("build_input", z_t.shape(), cond.latents.shape()));
    }
    Tensor::concat(0, &[z_t, &cond.latents, &cond.mask, &cond.rays])
}

/// `[C, F, h, w]` -> `[F (h/p) (w/p), C p²]`; tokens ordered (frame, row,
/// column), features ordered (channel, dy, dx).
pub fn patchify<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, f, h, w) = match x.shape() {
        [c, f, h, w] if h % p == 0 && w % p == 0 => (*c, *f, *h, *w),
        s => return Err(Error::invalid_shape("patchify", format!("{s:?} with patch {p}"))),
    };
    let (hp, wp) = (h / p, w / p);
    let feat = c * p * p;
    let mut out = vec![T::zero(); f * hp * wp * feat];
    let src = x.data();
    for ci in 0..c {
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..w {
                    let tok = (fi * hp + y / p) * wp + xx / p;
                    let col = ci * p * p + (y % p) * p + xx % p;
                    out[tok * feat + col] = src[((ci * f + fi) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::from_vec(&[f * hp * wp, feat], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, c: usize, f: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let (hp, wp) = (h / p, w / p);
    let feat = c * p * p;
    if tokens.shape() != [f * hp * wp, feat] {
        return Err(Error::shape("unpatchify", tokens.shape(), &[f * hp * wp, feat]));
    }
    let mut out = vec![T::zero(); c * f * h * w];
    let src = tokens.data();
    for ci in 0..c {
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..w {
                    let tok = (fi * hp + y / p) * wp + xx / p;
                    let col = ci * p * p + (y % p) * p + xx % p;
                    out[((ci * f + fi) * h + y) * w + xx] = src[tok * feat + col];
                }
            }
        }
    }
    Tensor::from_vec(&[c, f, h, w], out)
}

/// `(frame, row, column)` of each token.
pub fn token_positions(f: usize, hp: usize, wp: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(f * hp * wp);
    for t in 0..f {
        for y in 0..hp {
            for x in 0..wp {
                out.push([t, y, x]);
            }
        }
    }
    out
}
