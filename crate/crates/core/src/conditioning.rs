//! Turns posed views into a [`ConditionBundle`]: camera normalization,
//! Plücker ray maps brought to latent resolution, context encoding and
//! target placeholders. Frames are laid out inputs first, then targets.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionBundle, InputLayout};
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_downsample, express_in, normalize_to_first_view, normalize_to_query, pixel_unshuffle, plucker_ray_map,
    CameraView, Frame, Pose,
};
use crate::numerics::{Real, Tensor};
use crate::scenegen::ViewSet;
use crate::vae::{joint_frame_view, EncodingMode, Vae, SPATIAL_FACTOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coords {
    #[default]
    QueryCentered,
    FirstView,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayDownsample {
    #[default]
    PixelUnshuffle,
    Interpolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondOptions {
    pub encoding: EncodingMode,
    pub coords: Coords,
    pub raymap_downsample: RayDownsample,
}

impl Default for CondOptions {
    fn default() -> Self {
        Self {
            encoding: EncodingMode::PerView,
            coords: Coords::QueryCentered,
            raymap_downsample: RayDownsample::PixelUnshuffle,
        }
    }
}

impl CondOptions {
    pub fn ray_channels(&self) -> usize {
        match self.raymap_downsample {
            RayDownsample::PixelUnshuffle => 6 * SPATIAL_FACTOR * SPATIAL_FACTOR,
            RayDownsample::Interpolate => 6,
        }
    }

    pub fn layout(&self, latent_dim: usize) -> InputLayout {
        InputLayout {
            latent_dim,
            ray_channels: self.ray_channels(),
        }
    }
}

/// A view plus, optionally, its precomputed per-view latent.
#[derive(Clone, Copy, Debug)]
pub struct ViewInput<'v, T> {
    pub view: &'v CameraView,
    pub latent: Option<&'v Tensor<T>>,
}

impl<'v, T> ViewInput<'v, T> {
    pub fn new(view: &'v CameraView) -> Self {
        Self { view, latent: None }
    }
}

#[derive(Clone, Debug)]
pub struct Conditioned<T> {
    pub bundle: ConditionBundle<T>,
    /// Clean latents for every frame, present when every target has an
    /// image (training and evaluation).
    pub clean: Option<Tensor<T>>,
    /// Frame indices of the targets, in the order they were given.
    pub target_frames: Vec<usize>,
    pub scale: f64,
}

pub struct Conditioner<'a, T: Real> {
    pub vae: &'a Vae<T>,
    pub options: CondOptions,
    pub height: usize,
    pub width: usize,
    placeholder: Tensor<T>,
}

impl<'a, T: Real> Conditioner<'a, T> {
    pub fn new(vae: &'a Vae<T>, options: CondOptions, height: usize, width: usize) -> Result<Self> {
        if height % SPATIAL_FACTOR != 0 || width % SPATIAL_FACTOR != 0 {
            return Err(Error::invalid_shape(
                "conditioner",
                format!("{height}x{width} is not divisible by {SPATIAL_FACTOR}"),
            ));
        }
        Ok(Self {
            placeholder: vae.placeholder(height, width)?,
            vae,
            options,
            height,
            width,
        })
    }

    /// Reuses a placeholder latent computed earlier for this resolution.
    pub fn with_placeholder(
        vae: &'a Vae<T>,
        options: CondOptions,
        height: usize,
        width: usize,
        placeholder: Tensor<T>,
    ) -> Result<Self> {
        if placeholder.rank() != 4 || placeholder.dim(2) * SPATIAL_FACTOR != height || placeholder.dim(3) * SPATIAL_FACTOR != width {
            return Err(Error::shape("conditioner placeholder", placeholder.shape(), &[height, width]));
        }
        Ok(Self {
            vae,
            options,
            height,
            width,
            placeholder,
        })
    }

    pub fn layout(&self) -> InputLayout {
        self.options.layout(self.vae.latent_dim())
    }

    /// Ray map of one normalized camera at latent resolution, `[C_r, 1, h, w]`.
    fn rays(&self, view: &CameraView, pose: &Pose, frame: Frame) -> Result<Tensor<T>> {
        let map = plucker_ray_map(&view.intrinsics, pose, frame)?;
        let full = Tensor::from_vec(&[6, map.height, map.width], map.data)?;
        let small = match self.options.raymap_downsample {
            RayDownsample::PixelUnshuffle => pixel_unshuffle(&full, SPATIAL_FACTOR)?,
            RayDownsample::Interpolate => bilinear_downsample(&full, SPATIAL_FACTOR)?,
        };
        let (c, h, w) = (small.dim(0), small.dim(1), small.dim(2));
        small.cast::<T>().reshape(&[c, 1, h, w])
    }

    fn latent_of(&self, v: &ViewInput<'_, T>) -> Result<Option<Tensor<T>>> {
        match (v.latent, &v.view.image) {
            (Some(z), _) => Ok(Some(z.clone())),
            (None, Some(img)) => Ok(Some(self.vae.encode_image(img)?)),
            (None, None) => Ok(None),
        }
    }

    pub fn build(&self, inputs: &[ViewInput<'_, T>], targets: &[ViewInput<'_, T>]) -> Result<Conditioned<T>> {
        if inputs.is_empty() || targets.is_empty() {
            return Err(Error::Invalid("conditioning needs at least one input and one target".into()));
        }
        for v in inputs.iter().chain(targets) {
            if v.view.intrinsics.height != self.height || v.view.intrinsics.width != self.width {
                return Err(Error::shape(
                    "conditioning view",
                    &[v.view.intrinsics.height, v.view.intrinsics.width],
                    &[self.height, self.width],
                ));
            }
        }
        let in_poses: Vec<Pose> = inputs.iter().map(|v| v.view.pose).collect();
        let reference = &targets[0].view.pose;
        let (norm, frame) = match self.options.coords {
            Coords::QueryCentered => (normalize_to_query(&in_poses, reference)?, Frame::QueryCentered),
            Coords::FirstView => (normalize_to_first_view(&in_poses, reference)?, Frame::FirstView),
        };
        let frame_origin = match self.options.coords {
            Coords::QueryCentered => *reference,
            Coords::FirstView => in_poses[0],
        };
        let mut target_poses = vec![norm.query];
        target_poses.extend(targets[1..].iter().map(|v| express_in(&frame_origin, &v.view.pose, norm.scale)));

        let mut latents = Vec::new();
        let mut rays = Vec::new();
        match self.options.encoding {
            EncodingMode::PerView => {
                for (v, pose) in inputs.iter().zip(&norm.inputs) {
                    let z = self
                        .latent_of(v)?
                        .ok_or_else(|| Error::Invalid("input view has neither image nor latent".into()))?;
                    latents.push(z);
                    rays.push(self.rays(v.view, pose, frame)?);
                }
            }
            EncodingMode::Joint => {
                let imgs = inputs
                    .iter()
                    .map(|v| v.view.image.as_ref().ok_or_else(|| Error::Invalid("joint encoding needs input images".into())))
                    .collect::<Result<Vec<_>>>()?;
                let grid = self.vae.encode_joint_views(&imgs)?;
                for tau in 0..grid.frames() {
                    latents.push(grid.frame(tau)?);
                    let j = joint_frame_view(tau, inputs.len());
                    rays.push(self.rays(inputs[j].view, &norm.inputs[j], frame)?);
                }
            }
        }
        let n_ctx = latents.len();
        let mut clean_targets = Vec::with_capacity(targets.len());
        for (v, pose) in targets.iter().zip(&target_poses) {
            latents.push(self.placeholder.clone());
            rays.push(self.rays(v.view, pose, frame)?);
            clean_targets.push(self.latent_of(v)?);
        }
        let frames = latents.len();
        let is_input: Vec<bool> = (0..frames).map(|i| i < n_ctx).collect();
        let lat_refs: Vec<&Tensor<T>> = latents.iter().collect();
        let ray_refs: Vec<&Tensor<T>> = rays.iter().collect();
        let bundle = ConditionBundle::new(Tensor::concat(1, &lat_refs)?, is_input, Tensor::concat(1, &ray_refs)?, frame)?;
        let clean = if clean_targets.iter().all(Option::is_some) {
            let mut parts: Vec<&Tensor<T>> = latents[..n_ctx].iter().collect();
            parts.extend(clean_targets.iter().flatten());
            Some(Tensor::concat(1, &parts)?)
        } else {
            None
        };
        Ok(Conditioned {
            bundle,
            clean,
            target_frames: (n_ctx..frames).collect(),
            scale: norm.scale,
        })
    }
}

/// Per-view latents of every frame of every scene.
pub fn encode_views<T: Real>(vae: &Vae<T>, sets: &[ViewSet]) -> Result<Vec<Vec<Tensor<T>>>> {
    sets.iter()
        .map(|s| (0..s.views.len()).map(|k| vae.encode_image(s.image(k)?)).collect())
        .collect()
}

/// `ViewInput`s for the listed frames of one scene, attaching cached
/// latents when available.
pub fn view_inputs<'v, T>(set: &'v ViewSet, cache: Option<&'v [Tensor<T>]>, frames: &[usize]) -> Vec<ViewInput<'v, T>> {
    frames
        .iter()
        .map(|&k| ViewInput {
            view: &set.views[k],
            latent: cache.map(|c| &c[k]),
        })
        .collect()
}
