use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

fn chw(t: &Tensor<impl Copy>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid_shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Space-to-channel: `[C, H, W] -> [C f², H/f, W/f]`, output channel
/// `c f² + dy f + dx` holding input `(c, y f + dy, x f + dx)`.
pub fn pixel_unshuffle<T: Copy>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "pixel_unshuffle")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid_shape(
            "pixel_unshuffle",
            format!("factor {f} does not divide extent {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / f, w / f);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                for y in 0..ho {
                    for xx in 0..wo {
                        out.push(src[(ci * h + y * f + dy) * w + xx * f + dx]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * f * f, ho, wo], out)
}

/// Channel-to-space inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Copy>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (cf, ho, wo) = chw(x, "pixel_shuffle")?;
    if f == 0 || cf % (f * f) != 0 {
        return Err(Error::invalid_shape(
            "pixel_shuffle",
            format!("channel count {cf} not divisible by {f}^2"),
        ));
    }
    let c = cf / (f * f);
    let (h, w) = (ho * f, wo * f);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for y in 0..h {
            let (yo, dy) = (y / f, y % f);
            for xx in 0..w {
                let (xo, dx) = (xx / f, xx % f);
                let ch = ci * f * f + dy * f + dx;
                out.push(src[(ch * ho + yo) * wo + xo]);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Bilinear resize by an integer factor (half-pixel centers, edge clamp);
/// the interpolation alternative to [`pixel_unshuffle`].
pub fn bilinear_downsample<T: Real>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "bilinear_downsample")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid_shape(
            "bilinear_downsample",
            format!("factor {f} does not divide extent {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / f, w / f);
    let sample = |n: usize, i: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..ho {
            let (y0, y1, fy) = sample(h, y);
            for xx in 0..wo {
                let (x0, x1, fx) = sample(w, xx);
                let g = |yy: usize, xi: usize| plane[yy * w + xi].as_f64();
                let v = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
                    + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1));
                out.push(T::lit(v));
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}
