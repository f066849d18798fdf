use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_extent(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_extent(a, b, "mse")?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    std::array::from_fn(|i| {
        let x = i as f64 - r;
        (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    })
}

/// Gaussian-weighted local mean at every pixel. Windows are cut at the image
/// border and their weights renormalized; the window is separable, so this
/// runs as two 1-D passes.
fn local_mean(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let pass = |src: &[f64], n: usize, stride: usize, count: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            let base = line * step;
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                let (mut acc, mut wsum) = (0.0, 0.0);
                for j in lo..=hi {
                    let wt = g[j + r - i];
                    acc += wt * src[base + j * stride];
                    wsum += wt;
                }
                out[base + i * stride] = acc / wsum;
            }
        }
        out
    };
    let rows = pass(plane, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_extent(a, b, "ssim")?;
    let (h, w) = (a.height, a.width);
    let g = gaussian_1d();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|p| a.data[p * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b.data[p * 3 + c] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let ma = local_mean(&pa, h, w, &g);
        let mb = local_mean(&pb, h, w, &g);
        let saa = local_mean(&prod(&pa, &pa), h, w, &g);
        let sbb = local_mean(&prod(&pb, &pb), h, w, &g);
        let sab = local_mean(&prod(&pa, &pb), h, w, &g);
        for p in 0..h * w {
            let (mu_a, mu_b) = (ma[p], mb[p]);
            let va = saa[p] - mu_a * mu_a;
            let vb = sbb[p] - mu_b * mu_b;
            let cov = sab[p] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        }
    }
    Ok(total / (3 * h * w) as f64)
}
