//! Small causal video VAE. The encoder uses causal 3-D convolutions with two
//! `(2, 2, 2)`-strided stages, so `T` frames map to `1 + (T - 1) / 4` latent
//! frames at `1/4` spatial resolution. The decoder works frame by frame.

mod stack;
pub(crate) mod train;

pub use train::{pretrain_vae, reconstruction_psnr, VaeTrainConfig, VaeTrainLog};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use self::stack::Layer;
use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Conv3dSpec, Grads, ParamGroup, ParamStore, Real, Tensor};

pub const SPATIAL_FACTOR: usize = 4;
pub const TIME_FACTOR: usize = 4;
pub const VAE_CHECKPOINT_VERSION: u32 = 1;
const KIND: &[u8; 4] = b"VAE1";
const LOGVAR_CLAMP: (f64, f64) = (-20.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            enc_channels: [32, 48, 64],
            dec_channels: [64, 48, 32],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    PerView,
    Joint,
}

/// Latents `[d_z, T', h, w]` plus how they were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub data: Tensor<T>,
    pub mode: EncodingMode,
}

impl<T: Real> LatentGrid<T> {
    pub fn frames(&self) -> usize {
        self.data.dim(1)
    }

    pub fn frame(&self, i: usize) -> Result<Tensor<T>> {
        self.data.narrow(1, i, i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T> {
    pub config: VaeConfig,
    pub params: ParamStore<T>,
    /// Per-channel affine map applied to posterior means so latents are
    /// roughly zero-mean, unit-variance.
    pub latent_shift: Vec<f64>,
    pub latent_scale: Vec<f64>,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
}

fn conv_param<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 5],
    spec: Conv3dSpec,
    rng: &mut R,
) -> Layer {
    let fan_in = (shape[1] * shape[3] * shape[4]) as f64;
    let w = store.add(format!("{name}.w"), ParamGroup::Vae, Tensor::randn(&shape, (1.0 / fan_in).sqrt(), rng));
    let b = store.add(format!("{name}.b"), ParamGroup::Vae, Tensor::zeros(&[shape[0]]));
    Layer::Conv { w, b, spec }
}

/// Maps `[0, 1]` pixel values to the `[-1, 1]` network range.
fn frames_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor::<T>()).collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let mut x = Tensor::concat(1, &refs)?;
    for v in x.data_mut() {
        *v = *v * T::lit(2.0) - T::one();
    }
    Ok(x)
}

impl<T: Real> Vae<T> {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        if config.latent_dim == 0 || config.enc_channels.contains(&0) || config.dec_channels.contains(&0) {
            return Err(Error::config("vae", "channel counts must be positive"));
        }
        let mut p = ParamStore::new();
        let [e0, e1, e2] = config.enc_channels;
        let [d0, d1, d2] = config.dec_channels;
        let dz = config.latent_dim;
        let same = Conv3dSpec::causal([1, 1, 1], 1);
        let down = Conv3dSpec::causal([2, 2, 2], 1);
        let frame = Conv3dSpec {
            stride: [1, 1, 1],
            padding: [0, 1, 1],
            causal_time: false,
        };
        let encoder = vec![
            conv_param(&mut p, "vae.enc.conv_in", [e0, 3, 3, 3, 3], same, rng),
            Layer::Gelu,
            conv_param(&mut p, "vae.enc.down1", [e1, e0, 3, 3, 3], down, rng),
            Layer::Gelu,
            conv_param(&mut p, "vae.enc.down2", [e2, e1, 3, 3, 3], down, rng),
            Layer::Gelu,
            conv_param(&mut p, "vae.enc.head", [2 * dz, e2, 1, 3, 3], frame, rng),
        ];
        let decoder = vec![
            conv_param(&mut p, "vae.dec.conv_in", [d0, dz, 1, 3, 3], frame, rng),
            Layer::Gelu,
            Layer::Upsample(2),
            conv_param(&mut p, "vae.dec.up1", [d1, d0, 1, 3, 3], frame, rng),
            Layer::Gelu,
            Layer::Upsample(2),
            conv_param(&mut p, "vae.dec.up2", [d2, d1, 1, 3, 3], frame, rng),
            Layer::Gelu,
            conv_param(&mut p, "vae.dec.out", [3, d2, 1, 3, 3], frame, rng),
        ];
        Ok(Self {
            latent_shift: vec![0.0; dz],
            latent_scale: vec![1.0; dz],
            config,
            params: p,
            encoder,
            decoder,
        })
    }

    pub fn cast<U: Real>(&self) -> Vae<U> {
        Vae {
            config: self.config.clone(),
            params: self.params.cast(),
            latent_shift: self.latent_shift.clone(),
            latent_scale: self.latent_scale.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_frames(x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [3, t, h, w] if *t >= 1 && h % SPATIAL_FACTOR == 0 && w % SPATIAL_FACTOR == 0 => {
                if (t - 1) % TIME_FACTOR != 0 {
                    return Err(Error::invalid_shape(
                        "encode_joint",
                        format!("frame count {t} is not 1 mod {TIME_FACTOR}"),
                    ));
                }
                Ok(())
            }
            s => Err(Error::invalid_shape(
                "encode",
                format!("expected [3, T, H, W] with H, W divisible by {SPATIAL_FACTOR}, got {s:?}"),
            )),
        }
    }

    /// Raw posterior `(mean, logvar)`, each `[d_z, T', h, w]`, for frames in
    /// network range.
    pub(crate) fn posterior(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Self::check_frames(x)?;
        let (out, _) = stack::forward(&self.encoder, &self.params, x, false)?;
        let dz = self.config.latent_dim;
        let logvar = out
            .narrow(0, dz, 2 * dz)?
            .map(|v| v.max(T::lit(LOGVAR_CLAMP.0)).min(T::lit(LOGVAR_CLAMP.1)));
        Ok((out.narrow(0, 0, dz)?, logvar))
    }

    fn normalize(&self, mean: Tensor<T>) -> Tensor<T> {
        let per = mean.numel() / self.config.latent_dim;
        let mut z = mean;
        for (c, chunk) in z.data_mut().chunks_mut(per).enumerate() {
            let (s, k) = (T::lit(self.latent_shift[c]), T::lit(1.0 / self.latent_scale[c]));
            for v in chunk {
                *v = (*v - s) * k;
            }
        }
        z
    }

    fn denormalize(&self, z: &Tensor<T>) -> Tensor<T> {
        let per = z.numel() / self.config.latent_dim;
        let mut out = z.clone();
        for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let (s, k) = (T::lit(self.latent_shift[c]), T::lit(self.latent_scale[c]));
            for v in chunk {
                *v = *v * k + s;
            }
        }
        out
    }

    /// Encodes a video `[3, T, H, W]` (values in `[0, 1]`) with `T ≡ 1 mod 4`
    /// into normalized posterior means.
    pub fn encode_joint(&self, frames: &Tensor<T>) -> Result<LatentGrid<T>> {
        let mut x = frames.clone();
        for v in x.data_mut() {
            *v = *v * T::lit(2.0) - T::one();
        }
        let (mean, _) = self.posterior(&x)?;
        Ok(LatentGrid {
            data: self.normalize(mean),
            mode: EncodingMode::Joint,
        })
    }

    /// Single image as a one-frame video: `[d_z, 1, h, w]`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<T>> {
        let x = frames_tensor::<T>(&[image])?;
        let (mean, _) = self.posterior(&x)?;
        Ok(self.normalize(mean))
    }

    /// Each view is encoded on its own; results are stacked along time.
    pub fn encode_per_view(&self, views: &[&Image]) -> Result<LatentGrid<T>> {
        if views.is_empty() {
            return Err(Error::Invalid("encode_per_view needs at least one view".into()));
        }
        let parts = views.iter().map(|v| self.encode_image(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(LatentGrid {
            data: Tensor::concat(1, &refs)?,
            mode: EncodingMode::PerView,
        })
    }

    /// Context views encoded as one clip. The clip is padded to a valid
    /// length by repeating the last view; latent frame `τ` summarizes views
    /// up to `4τ` (see [`joint_frame_view`]).
    pub fn encode_joint_views(&self, views: &[&Image]) -> Result<LatentGrid<T>> {
        let last = views
            .last()
            .ok_or_else(|| Error::Invalid("joint encoding needs at least one view".into()))?;
        let t = joint_padded_len(views.len());
        let mut padded: Vec<&Image> = views.to_vec();
        padded.resize(t, last);
        let x = frames_tensor::<T>(&padded)?;
        let (mean, _) = self.posterior(&x)?;
        Ok(LatentGrid {
            data: self.normalize(mean),
            mode: EncodingMode::Joint,
        })
    }

    /// Encoding of the all-black image, used as the target-slot placeholder.
    pub fn placeholder(&self, height: usize, width: usize) -> Result<Tensor<T>> {
        self.encode_image(&Image::zeros(height, width))
    }

    /// Appends the placeholder latent after the context frames.
    pub fn assemble_sequence(&self, ctx: &LatentGrid<T>, height: usize, width: usize) -> Result<LatentGrid<T>> {
        let ph = self.placeholder(height, width)?;
        if ph.shape()[2..] != ctx.data.shape()[2..] {
            return Err(Error::shape("assemble_sequence", ctx.data.shape(), ph.shape()));
        }
        Ok(LatentGrid {
            data: Tensor::concat(1, &[&ctx.data, &ph])?,
            mode: ctx.mode,
        })
    }

    /// Network-range decoder output `[3, T, H, W]` (unclamped).
    pub(crate) fn decode_raw(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 4 || z.dim(0) != self.config.latent_dim {
            return Err(Error::shape("decode", z.shape(), &[self.config.latent_dim, 1, 0, 0]));
        }
        Ok(stack::forward(&self.decoder, &self.params, z, false)?.0)
    }

    /// Decodes one normalized latent frame `[d_z, 1, h, w]` into an image.
    pub fn decode_frame(&self, z: &Tensor<T>) -> Result<Image> {
        if z.rank() != 4 || z.dim(1) != 1 {
            return Err(Error::invalid_shape("decode_frame", format!("expected one frame, got {:?}", z.shape())));
        }
        let y = self.decode_raw(&self.denormalize(z))?;
        let img = y.map(|v| ((v + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one()));
        Image::from_tensor(&img)
    }

    pub fn decode_per_view(&self, grid: &LatentGrid<T>) -> Result<Vec<Image>> {
        (0..grid.frames()).map(|i| self.decode_frame(&grid.frame(i)?)).collect()
    }

    pub(crate) fn layers(&self) -> (&[Layer], &[Layer]) {
        (&self.encoder, &self.decoder)
    }

    pub(crate) fn grads(&self) -> Grads<T> {
        Grads::new(&self.params, crate::numerics::GradMask::ALL)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut e = Encoder::new(KIND, VAE_CHECKPOINT_VERSION);
        self.write_into(&mut e);
        e.write(path)
    }

    pub(crate) fn write_into(&self, e: &mut Encoder) {
        e.str(&serde_json::to_string(&self.config).expect("config serializes"));
        e.f64s(&self.latent_shift);
        e.f64s(&self.latent_scale);
        e.store(&self.params);
    }

    pub(crate) fn read_from(d: &mut Decoder<'_>) -> Result<Self> {
        let config: VaeConfig = serde_json::from_str(&d.str()?)
            .map_err(|e| Error::Integrity(format!("vae config in checkpoint: {e}")))?;
        let mut vae = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        vae.latent_shift = d.f64s()?;
        vae.latent_scale = d.f64s()?;
        if vae.latent_shift.len() != vae.config.latent_dim || vae.latent_scale.len() != vae.config.latent_dim {
            return Err(Error::Integrity("latent statistics do not match latent_dim".into()));
        }
        d.store_into(&mut vae.params)?;
        Ok(vae)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        let mut d = Decoder::open(&bytes, KIND, "vae checkpoint", VAE_CHECKPOINT_VERSION)?;
        let vae = Self::read_from(&mut d)?;
        d.finish()?;
        Ok(vae)
    }
}

/// Clip length used when `k` context views are encoded jointly.
pub fn joint_padded_len(k: usize) -> usize {
    1 + TIME_FACTOR * (k.max(1) - 1).div_ceil(TIME_FACTOR)
}

/// Context view whose camera labels joint latent frame `tau`.
pub fn joint_frame_view(tau: usize, k: usize) -> usize {
    (TIME_FACTOR * tau).min(k - 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vae() -> Vae<f64> {
        Vae::new(VaeConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn video(t: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[3, t, 8, 12], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn temporal_length_law() {
        let v = vae();
        for t in [1, 5, 9, 13] {
            let g = v.encode_joint(&video(t, t as u64)).unwrap();
            assert_eq!(g.data.shape(), &[8, 1 + (t - 1) / 4, 2, 3]);
        }
        assert!(v.encode_joint(&video(4, 0)).is_err());
    }

    #[test]
    fn padded_lengths() {
        assert_eq!(joint_padded_len(1), 1);
        assert_eq!(joint_padded_len(5), 5);
        assert_eq!(joint_padded_len(6), 9);
        assert_eq!(joint_frame_view(2, 6), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.bin");
        let mut v = vae();
        v.latent_shift[3] = 0.25;
        v.save(&path).unwrap();
        assert_eq!(Vae::<f64>::load(&path).unwrap(), v);
    }
}
