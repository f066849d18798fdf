//! 3D convolution over `[C, T, H, W]` volumes via im2col + GEMM.
//!
//! With `causal_time` the time axis is padded by `kt - 1` frames on the past
//! side only, so output frame `t` sees input frames `<= t * stride_t`.

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    /// Symmetric padding per axis `(t, h, w)`; the time entry is ignored when
    /// `causal_time` is set.
    pub padding: [usize; 3],
    pub causal_time: bool,
}

impl Conv3dSpec {
    pub fn causal(stride: [usize; 3], spatial_pad: usize) -> Self {
        Self {
            stride,
            padding: [0, spatial_pad, spatial_pad],
            causal_time: true,
        }
    }

    fn time_pad(&self, kt: usize) -> (usize, usize) {
        if self.causal_time {
            (kt - 1, 0)
        } else {
            (self.padding[0], self.padding[0])
        }
    }
}

#[derive(Clone, Debug)]
struct Geometry {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    o: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    /// Time taps that touch at least one real input frame.
    taps: Vec<usize>,
}

fn geometry<T: Real>(x_shape: &[usize], w: &Tensor<T>, spec: &Conv3dSpec) -> Result<Geometry> {
    if x_shape.len() != 4 || w.rank() != 5 || w.dim(1) != x_shape[0] {
        return Err(Error::shape("conv3d", x_shape, w.shape()));
    }
    let (c, t, h, w_) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, kt, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
    if spec.stride.iter().any(|&s| s == 0) {
        return Err(Error::invalid_shape("conv3d", "zero stride"));
    }
    let (pf, pb) = spec.time_pad(kt);
    let span = |n: usize, p0: usize, p1: usize, k: usize, s: usize| -> Result<usize> {
        let padded = n + p0 + p1;
        if padded < k {
            return Err(Error::shape("conv3d", x_shape, w.shape()));
        }
        Ok((padded - k) / s + 1)
    };
    let to = span(t, pf, pb, kt, spec.stride[0])?;
    let ho = span(h, spec.padding[1], spec.padding[1], kh, spec.stride[1])?;
    let wo = span(w_, spec.padding[2], spec.padding[2], kw, spec.stride[2])?;
    let taps = (0..kt)
        .filter(|&dt| {
            (0..to).any(|ot| {
                let ti = (ot * spec.stride[0] + dt) as isize - pf as isize;
                ti >= 0 && (ti as usize) < t
            })
        })
        .collect();
    Ok(Geometry {
        c,
        t,
        h,
        w: w_,
        o,
        kt,
        kh,
        kw,
        to,
        ho,
        wo,
        pad_t: pf,
        taps,
    })
}

/// Cached column matrix from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    x_shape: Vec<usize>,
}

fn all_taps(g: &Geometry) -> bool {
    g.taps.len() == g.kt
}

/// Weight restricted to the active time taps, `[O, C * taps * kh * kw]`.
fn active_weight<T: Real>(w: &Tensor<T>, g: &Geometry) -> Vec<T> {
    let k2 = g.kh * g.kw;
    let mut out = Vec::with_capacity(g.o * g.c * g.taps.len() * k2);
    for o in 0..g.o {
        for c in 0..g.c {
            for &dt in &g.taps {
                let start = ((o * g.c + c) * g.kt + dt) * k2;
                out.extend_from_slice(&w.data()[start..start + k2]);
            }
        }
    }
    out
}

fn im2col<T: Real>(x: &[T], g: &Geometry, spec: &Conv3dSpec) -> Vec<T> {
    let p = g.to * g.ho * g.wo;
    let rows = g.c * g.taps.len() * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * p];
    let mut r = 0;
    for c in 0..g.c {
        for &dt in &g.taps {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for ot in 0..g.to {
                        let ti = (ot * spec.stride[0] + dt) as isize - g.pad_t as isize;
                        if ti < 0 || ti as usize >= g.t {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let yi = (oy * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                            if yi < 0 || yi as usize >= g.h {
                                continue;
                            }
                            let src = ((c * g.t + ti as usize) * g.h + yi as usize) * g.w;
                            let dst = (ot * g.ho + oy) * g.wo;
                            for ox in 0..g.wo {
                                let xi = (ox * spec.stride[2] + dx) as isize - spec.padding[2] as isize;
                                if xi >= 0 && (xi as usize) < g.w {
                                    row[dst + ox] = x[src + xi as usize];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, spec: &Conv3dSpec) -> Vec<T> {
    let p = g.to * g.ho * g.wo;
    let mut dx = vec![T::zero(); g.c * g.t * g.h * g.w];
    let mut r = 0;
    for c in 0..g.c {
        for &dt in &g.taps {
            for dy in 0..g.kh {
                for dxk in 0..g.kw {
                    let row = &cols[r * p..(r + 1) * p];
                    for ot in 0..g.to {
                        let ti = (ot * spec.stride[0] + dt) as isize - g.pad_t as isize;
                        if ti < 0 || ti as usize >= g.t {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let yi = (oy * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                            if yi < 0 || yi as usize >= g.h {
                                continue;
                            }
                            let dst = ((c * g.t + ti as usize) * g.h + yi as usize) * g.w;
                            let src = (ot * g.ho + oy) * g.wo;
                            for ox in 0..g.wo {
                                let xi = (ox * spec.stride[2] + dxk) as isize - spec.padding[2] as isize;
                                if xi >= 0 && (xi as usize) < g.w {
                                    dx[dst + xi as usize] += row[src + ox];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    dx
}

/// `x: [C, T, H, W]`, `w: [O, C, kt, kh, kw]`, `b: [O]` -> `[O, T', H', W']`.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = geometry(x.shape(), w, spec)?;
    let cols = im2col(x.data(), &g, spec);
    let p = g.to * g.ho * g.wo;
    let kdim = g.c * g.taps.len() * g.kh * g.kw;
    let mut y = vec![T::zero(); g.o * p];
    if let Some(b) = b {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv3d bias", b.shape(), &[g.o]));
        }
        for (o, row) in y.chunks_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if all_taps(&g) {
        gemm(g.o, kdim, p, T::one(), w.data(), false, &cols, false, beta, &mut y);
    } else {
        let wa = active_weight(w, &g);
        gemm(g.o, kdim, p, T::one(), &wa, false, &cols, false, beta, &mut y);
    }
    let y = Tensor::from_vec(&[g.o, g.to, g.ho, g.wo], y)?;
    Ok((
        y,
        ConvCache {
            cols,
            x_shape: x.shape().to_vec(),
        },
    ))
}

/// Backward of [`conv3d`]; accumulates into `dw` / `db`.
pub fn conv3d_backward<T: Real>(
    w: &Tensor<T>,
    cache: &ConvCache<T>,
    dy: &Tensor<T>,
    spec: &Conv3dSpec,
    dw: Option<&mut Tensor<T>>,
    db: Option<&mut Tensor<T>>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let g = geometry(&cache.x_shape, w, spec)?;
    let p = g.to * g.ho * g.wo;
    if dy.shape() != [g.o, g.to, g.ho, g.wo] {
        return Err(Error::shape("conv3d_backward", dy.shape(), &[g.o, g.to, g.ho, g.wo]));
    }
    let kdim = g.c * g.taps.len() * g.kh * g.kw;
    if let Some(db) = db {
        for (o, row) in dy.data().chunks(p).enumerate() {
            let s: T = row.iter().copied().sum();
            db.data_mut()[o] += s;
        }
    }
    if let Some(dw) = dw {
        if all_taps(&g) {
            gemm(g.o, p, kdim, T::one(), dy.data(), false, &cache.cols, true, T::one(), dw.data_mut());
        } else {
            let mut da = vec![T::zero(); g.o * kdim];
            gemm(g.o, p, kdim, T::one(), dy.data(), false, &cache.cols, true, T::zero(), &mut da);
            let k2 = g.kh * g.kw;
            let mut src = da.chunks(k2);
            for o in 0..g.o {
                for c in 0..g.c {
                    for &dt in &g.taps {
                        let start = ((o * g.c + c) * g.kt + dt) * k2;
                        let chunk = src.next().expect("tap layout");
                        for (a, &b) in dw.data_mut()[start..start + k2].iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dcols = vec![T::zero(); kdim * p];
    if all_taps(&g) {
        gemm(kdim, g.o, p, T::one(), w.data(), true, dy.data(), false, T::zero(), &mut dcols);
    } else {
        let wa = active_weight(w, &g);
        gemm(kdim, g.o, p, T::one(), &wa, true, dy.data(), false, T::zero(), &mut dcols);
    }
    let dx = col2im(&dcols, &g, spec);
    Ok(Some(Tensor::from_vec(&cache.x_shape, dx)?))
}

/// Nearest-neighbour spatial upsampling of `[C, T, H, W]` by `f`.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (c, t, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![T::zero(); c * t * h * f * w * f];
    let (ho, wo) = (h * f, w * f);
    for ct in 0..c * t {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ct * ho + y) * wo + xx] = x.data()[(ct * h + y / f) * w + xx / f];
            }
        }
    }
    Tensor::from_vec(&[c, t, ho, wo], out).expect("upsample shape")
}

pub fn upsample_nearest_backward<T: Real>(dy: &Tensor<T>, f: usize) -> Tensor<T> {
    let (c, t, ho, wo) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
    let (h, w) = (ho / f, wo / f);
    let mut dx = vec![T::zero(); c * t * h * w];
    for ct in 0..c * t {
        for y in 0..ho {
            for xx in 0..wo {
                dx[(ct * h + y / f) * w + xx / f] += dy.data()[(ct * ho + y) * wo + xx];
            }
        }
    }
    Tensor::from_vec(&[c, t, h, w], dx).expect("upsample shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct six-loop convolution, independent of the im2col path.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &Conv3dSpec) -> Tensor<f64> {
        let (c, t, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kt, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
        let (pf, pb) = spec.time_pad(kt);
        let to = (t + pf + pb - kt) / spec.stride[0] + 1;
        let ho = (h + 2 * spec.padding[1] - kh) / spec.stride[1] + 1;
        let wo = (wd + 2 * spec.padding[2] - kw) / spec.stride[2] + 1;
        let mut y = Tensor::zeros(&[o, to, ho, wo]);
        for oc in 0..o {
            for ot in 0..to {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for dt in 0..kt {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let ti = (ot * spec.stride[0] + dt) as isize - pf as isize;
                                        let yi = (oy * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                                        let xi = (ox * spec.stride[2] + dx) as isize - spec.padding[2] as isize;
                                        if ti < 0 || yi < 0 || xi < 0 || ti >= t as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        let xv = x.data()[((ic * t + ti as usize) * h + yi as usize) * wd + xi as usize];
                                        let wv = w.data()[(((oc * c + ic) * kt + dt) * kh + dy) * kw + dx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y.data_mut()[((oc * to + ot) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (t, stride, causal) in [(5, [2, 2, 2], true), (1, [1, 1, 1], true), (4, [1, 2, 1], false)] {
            let x = Tensor::<f64>::randn(&[3, t, 6, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let spec = Conv3dSpec {
                stride,
                padding: [1, 1, 1],
                causal_time: causal,
            };
            let (y, _) = conv3d(&x, &w, Some(&b), &spec).unwrap();
            let r = conv_reference(&x, &w, &b, &spec);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
        }
    }

    #[test]
    fn causal_output_ignores_future_frames() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 6, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
        let spec = Conv3dSpec::causal([1, 1, 1], 1);
        let (y, _) = conv3d(&x, &w, None, &spec).unwrap();
        for tau in 0..6 {
            let mut x2 = x.clone();
            for c in 0..2 {
                for t in tau + 1..6 {
                    for i in 0..16 {
                        x2.data_mut()[(c * 6 + t) * 16 + i] += 3.0;
                    }
                }
            }
            let (y2, _) = conv3d(&x2, &w, None, &spec).unwrap();
            let a = y.narrow(1, 0, tau + 1).unwrap();
            let b = y2.narrow(1, 0, tau + 1).unwrap();
            assert_eq!(a, b, "frame {tau} leaked future input");
        }
    }
}
