use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{frames_tensor, stack, Vae, VaeConfig, LOGVAR_CLAMP};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::image::Image;
use crate::numerics::{AdamW, AdamWConfig, Grads, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            lr_floor: 0.05,
            kl_weight: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VaeTrainLog {
    /// `(step, loss, lr)` per optimizer step.
    pub steps: Vec<(usize, f64, f64)>,
}

/// Reconstruction MSE plus `kl_weight` times the mean per-element KL, for one
/// frame in network range. `eps` is the reparameterization noise; gradients
/// are accumulated into `grads`.
pub(crate) fn vae_loss_and_grad<T: Real>(
    vae: &Vae<T>,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    kl_weight: f64,
    grads: &mut Grads<T>,
) -> Result<f64> {
    let (enc, dec) = vae.layers();
    let dz = vae.config.latent_dim;
    let (out, enc_cache) = stack::forward(enc, &vae.params, x, true)?;
    let mean = out.narrow(0, 0, dz)?;
    let logvar_raw = out.narrow(0, dz, 2 * dz)?;
    let (lo, hi) = (T::lit(LOGVAR_CLAMP.0), T::lit(LOGVAR_CLAMP.1));
    let logvar = logvar_raw.map(|v| v.max(lo).min(hi));
    if eps.shape() != mean.shape() {
        return Err(Error::shape("vae noise", eps.shape(), mean.shape()));
    }
    let half = T::lit(0.5);
    let std: Vec<T> = logvar.data().iter().map(|&l| (l * half).exp()).collect();
    let z_data: Vec<T> = (0..mean.numel())
        .map(|i| mean.data()[i] + std[i] * eps.data()[i])
        .collect();
    let z = Tensor::from_vec(mean.shape(), z_data)?;
    let (y, dec_cache) = stack::forward(dec, &vae.params, &z, true)?;
    if y.shape() != x.shape() {
        return Err(Error::shape("vae reconstruction", y.shape(), x.shape()));
    }

    let n = T::lit(x.numel() as f64);
    let nz = T::lit(mean.numel() as f64);
    let beta = T::lit(kl_weight);
    let mut rec = 0.0;
    let dy: Vec<T> = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| {
            let d = a - b;
            rec += (d * d).as_f64();
            T::lit(2.0) * d / n
        })
        .collect();
    rec /= x.numel() as f64;
    let mut kl = 0.0;
    for i in 0..mean.numel() {
        let (m, l) = (mean.data()[i], logvar.data()[i]);
        kl += (half * (m * m + l.exp() - T::one() - l)).as_f64();
    }
    kl /= mean.numel() as f64;

    let dzt = stack::backward(dec, &vae.params, &dec_cache, Tensor::from_vec(y.shape(), dy)?, grads, true)?
        .expect("decoder input gradient");
    let mut dout = vec![T::zero(); out.numel()];
    let m_len = mean.numel();
    for i in 0..m_len {
        let (m, l, raw) = (mean.data()[i], logvar.data()[i], logvar_raw.data()[i]);
        let g = dzt.data()[i];
        dout[i] = g + beta * m / nz;
        let inside = raw >= lo && raw <= hi;
        dout[m_len + i] = if inside {
            g * eps.data()[i] * half * std[i] + beta * half * (l.exp() - T::one()) / nz
        } else {
            T::zero()
        };
    }
    stack::backward(enc, &vae.params, &enc_cache, Tensor::from_vec(out.shape(), dout)?, grads, false)?;
    Ok(rec + kl_weight * kl)
}

fn cosine_lr(cfg: &VaeTrainConfig, step: usize) -> f64 {
    let p = step as f64 / cfg.steps.max(1) as f64;
    cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains a fresh VAE on single frames, then fits the per-channel latent
/// normalization on the same images.
pub fn pretrain_vae(images: &[&Image], config: VaeConfig, cfg: &VaeTrainConfig) -> Result<(Vae<f32>, VaeTrainLog)> {
    if images.is_empty() {
        return Err(Error::Invalid("no images to train the VAE on".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::config("vae_train.batch", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vae = Vae::<f32>::new(config, &mut rng)?;
    let inputs = images
        .iter()
        .map(|im| frames_tensor::<f32>(&[im]))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() }, &vae.params);
    let mut log = VaeTrainLog::default();
    let mut grads = vae.grads();
    for step in 0..cfg.steps {
        grads.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let x = &inputs[rng.random_range(0..inputs.len())];
            let (h, w) = (x.dim(2) / super::SPATIAL_FACTOR, x.dim(3) / super::SPATIAL_FACTOR);
            let shape = [vae.config.latent_dim, 1, h, w];
            let eps_data = (0..shape.iter().product::<usize>())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f32>>();
            let eps = Tensor::from_vec(&shape, eps_data)?;
            loss += vae_loss_and_grad(&vae, x, &eps, cfg.kl_weight, &mut grads)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step,
                t: vec![],
                batch: vec!["vae pretraining".into()],
            });
        }
        grads.scale(1.0 / cfg.batch as f32);
        let lr = cosine_lr(cfg, step);
        opt.update(&mut vae.params, &grads, lr);
        log.steps.push((step, loss, lr));
    }
    fit_latent_stats(&mut vae, images)?;
    Ok((vae, log))
}

/// Per-channel mean and standard deviation of posterior means.
fn fit_latent_stats<T: Real>(vae: &mut Vae<T>, images: &[&Image]) -> Result<()> {
    let dz = vae.config.latent_dim;
    let (mut s1, mut s2, mut n) = (vec![0.0; dz], vec![0.0; dz], 0usize);
    for im in images {
        let (mean, _) = vae.posterior(&frames_tensor::<T>(&[im])?)?;
        let per = mean.numel() / dz;
        for (c, chunk) in mean.data().chunks(per).enumerate() {
            for v in chunk {
                let v = v.as_f64();
                s1[c] += v;
                s2[c] += v * v;
            }
        }
        n += per;
    }
    for c in 0..dz {
        let m = s1[c] / n as f64;
        let var = (s2[c] / n as f64 - m * m).max(0.0);
        vae.latent_shift[c] = m;
        vae.latent_scale[c] = var.sqrt().max(1e-3);
    }
    Ok(())
}

/// Mean PSNR of `decode(encode(image))` over `images`.
pub fn reconstruction_psnr<T: Real>(vae: &Vae<T>, images: &[&Image]) -> Result<f64> {
    let mut total = 0.0;
    for im in images {
        let z = vae.encode_image(im)?;
        total += psnr(&vae.decode_frame(&z)?, im)?;
    }
    Ok(total / images.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradMask};

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = VaeConfig {
            latent_dim: 2,
            enc_channels: [3, 4, 4],
            dec_channels: [4, 3, 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vae = Vae::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[3, 1, 8, 8], -1.0, 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        let mut grads = Grads::new(&vae.params, GradMask::ALL);
        vae_loss_and_grad(&vae, &x, &eps, 0.1, &mut grads).unwrap();
        let analytic = grads.flatten(&vae.params);
        let flat = vae.params.flatten();
        let mut probe = vae.clone();
        let idx: Vec<usize> = (0..flat.len()).step_by(7).collect();
        let report = finite_diff_check(
            "vae loss",
            |p| {
                probe.params.unflatten(p);
                let mut g = Grads::new(&probe.params, GradMask::ALL);
                vae_loss_and_grad(&probe, &x, &eps, 0.1, &mut g).unwrap()
            },
            &flat,
            &analytic,
            1e-5,
            Some(&idx),
        );
        assert!(report.passes(1e-4), "{report}");
    }
}
