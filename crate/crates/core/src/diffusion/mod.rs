//! Flow matching on the linear path `z_t = (1 - t) z_0 + t eps`: noising,
//! the frame-masked velocity loss and a uniform-step Euler sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionBundle, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::{Real, Reduction, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub t: f64,
    pub eps: Tensor<T>,
    pub z_t: Tensor<T>,
    /// `eps - z_0`.
    pub velocity_target: Tensor<T>,
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("flow time {t} outside [0, 1]")))
    }
}

/// Linear interpolant between data and noise at time `t`, over every frame.
pub fn noise_sample<T: Real>(z0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Result<FlowSample<T>> {
    check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise_sample", eps.shape(), z0.shape()));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let mut z_t = z0.clone();
    let mut v = eps.clone();
    for ((z, &e), (vv, &x)) in z_t.data_mut().iter_mut().zip(eps.data()).zip(v.data_mut().iter_mut().zip(z0.data())) {
        *z = a * *z + b * e;
        *vv -= x;
    }
    Ok(FlowSample {
        t,
        eps: eps.clone(),
        z_t,
        velocity_target: v,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    TargetOnly,
    FullSequence,
}

/// Mean squared velocity error over the supervised frames, with its
/// gradient with respect to `pred`. Predictions are `[C, F, h, w]`;
/// `is_input[f]` marks context frames.
pub fn fm_loss<T: Real>(
    pred: &Tensor<T>,
    sample: &FlowSample<T>,
    is_input: &[bool],
    supervision: Supervision,
) -> Result<(f64, Tensor<T>)> {
    let target = &sample.velocity_target;
    if pred.shape() != target.shape() || pred.rank() != 4 || pred.dim(1) != is_input.len() {
        return Err(Error::shape("fm_loss", pred.shape(), target.shape()));
    }
    let keep: Vec<bool> = match supervision {
        Supervision::TargetOnly => is_input.iter().map(|&b| !b).collect(),
        Supervision::FullSequence => vec![true; is_input.len()],
    };
    let n_keep = keep.iter().filter(|&&k| k).count();
    if n_keep == 0 {
        return Err(Error::Invalid("fm_loss: no supervised frame".into()));
    }
    let (c, f) = (pred.dim(0), pred.dim(1));
    let plane = pred.dim(2) * pred.dim(3);
    let count = (c * n_keep * plane) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    let g = T::lit(2.0 / count);
    for ch in 0..c {
        for fr in (0..f).filter(|&fr| keep[fr]) {
            let o = (ch * f + fr) * plane;
            for i in o..o + plane {
                let d = pred.data()[i] - target.data()[i];
                sum += d.as_f64() * d.as_f64();
                grad.data_mut()[i] = g * d;
            }
        }
    }
    Ok((sum / count, grad))
}

/// Anything that predicts velocities for a conditioned latent sequence.
pub trait VelocityModel<T: Real> {
    fn velocity(&self, z_t: &Tensor<T>, cond: &ConditionBundle<T>, t: f64) -> Result<Tensor<T>>;
}

/// Denoiser with a fixed attention reduction order.
pub struct DenoiserVelocity<'a, T> {
    pub model: &'a Denoiser<T>,
    pub reduction: Reduction,
}

impl<T: Real> VelocityModel<T> for DenoiserVelocity<'_, T> {
    fn velocity(&self, z_t: &Tensor<T>, cond: &ConditionBundle<T>, t: f64) -> Result<Tensor<T>> {
        self.model.forward(z_t, cond, t, self.reduction)
    }
}

/// How context slots of the state are treated while integrating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    /// Context slots are reset to the exact interpolant of their clean
    /// latent and their own noise at every step.
    #[default]
    Renoise,
    /// Every slot follows the predicted velocity.
    Integrate,
    /// Context slots hold their clean latent throughout.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub context: ContextPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            context: ContextPolicy::Renoise,
        }
    }
}

/// Gaussian noise for one frame slot, drawn from its own stream so the
/// noise follows the view it is attached to.
pub fn slot_noise<T: Real>(seed: u64, slot_key: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot_key);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Stacks per-slot noise `[C, 1, h, w]` into `[C, F, h, w]`.
pub fn sequence_noise<T: Real>(seed: u64, slot_keys: &[u64], latent_dim: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let frames: Vec<Tensor<T>> = slot_keys.iter().map(|&k| slot_noise(seed, k, &[latent_dim, 1, h, w])).collect();
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Tensor::concat(1, &refs)
}

fn set_context<T: Real>(z: &mut Tensor<T>, cond: &ConditionBundle<T>, noise: &Tensor<T>, t: f64) {
    let (c, f) = (z.dim(0), z.dim(1));
    let plane = z.dim(2) * z.dim(3);
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    for ch in 0..c {
        for fr in (0..f).filter(|&fr| cond.is_input()[fr]) {
            let o = (ch * f + fr) * plane;
            for i in o..o + plane {
                z.data_mut()[i] = a * cond.latents.data()[i] + b * noise.data()[i];
            }
        }
    }
}

/// Integrates `dz/dt = v` from `t = 1` to `t = 0` in `steps` uniform Euler
/// steps starting at `noise` and returns the whole final state
/// `[C, F, h, w]`. Target slots are the frames with `is_input = false`.
pub fn euler_sample<T: Real, M: VelocityModel<T> + ?Sized>(
    model: &M,
    cond: &ConditionBundle<T>,
    noise: &Tensor<T>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    if cfg.steps == 0 {
        return Err(Error::config("sampler.steps", "must be at least 1"));
    }
    if noise.shape() != cond.latents.shape() {
        return Err(Error::shape("euler_sample noise", noise.shape(), cond.latents.shape()));
    }
    let n = cfg.steps;
    let mut z = noise.clone();
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let t_next = 1.0 - (i + 1) as f64 / n as f64;
        match cfg.context {
            ContextPolicy::Renoise => set_context(&mut z, cond, noise, t),
            ContextPolicy::Clean => set_context(&mut z, cond, noise, 0.0),
            ContextPolicy::Integrate => {}
        }
        let v = model.velocity(&z, cond, t)?;
        let dt = T::lit(t - t_next);
        for (zz, &vv) in z.data_mut().iter_mut().zip(v.data()) {
            *zz -= dt * vv;
        }
    }
    if cfg.context != ContextPolicy::Integrate {
        set_context(&mut z, cond, noise, 0.0);
    }
    Ok(z)
}

/// Frames of `z` selected by `frames`, stacked in that order.
pub fn select_frames<T: Real>(z: &Tensor<T>, frames: &[usize]) -> Result<Tensor<T>> {
    z.gather(1, frames)
}
