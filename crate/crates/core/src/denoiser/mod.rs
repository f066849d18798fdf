//! Miniature diffusion transformer. Inputs are channel-concatenated
//! `[z_t; context latents; mask; ray maps]`, patch-embedded with a
//! `(1, p, p)` kernel, run through adaLN blocks with full attention over
//! every token, and projected back to per-frame velocities.

pub(crate) mod block;
mod input;
pub(crate) mod lora;
mod rope;

pub use input::{build_input, patchify, token_positions, unpatchify, ConditionBundle};
pub use lora::lora_apply;
pub use rope::{rope_rotate, RopeConfig, RopeTable, TemporalRope};

use rand::Rng;
use serde::{Deserialize, Serialize};

use self::block::{Block, BlockCache};
use crate::error::{Error, Result};
use crate::numerics::{
    embedding_timestep, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, GradMask,
    Grads, NormCache, ParamGroup, ParamId, ParamStore, Real, Reduction, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub time_freq_dim: usize,
    pub rope: RopeConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            heads: 4,
            blocks: 4,
            ffn_mult: 4,
            patch: 2,
            lora_rank: 32,
            lora_alpha: 32.0,
            time_freq_dim: 64,
            rope: RopeConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config("denoiser.heads", "model_dim must be a positive multiple of heads"));
        }
        if self.patch == 0 || self.lora_rank == 0 || self.ffn_mult == 0 {
            return Err(Error::config("denoiser", "patch, lora_rank and ffn_mult must be positive"));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return Err(Error::config("denoiser.time_freq_dim", "must be positive and even"));
        }
        self.rope.validate(self.model_dim / self.heads)
    }
}

/// Channel layout of the denoiser input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub latent_dim: usize,
    pub ray_channels: usize,
}

impl InputLayout {
    /// `d_z + (d_z + 1) + C_r`.
    pub fn channels(&self) -> usize {
        2 * self.latent_dim + 1 + self.ray_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    pe_w: ParamId,
    pe_b: ParamId,
    t1_w: ParamId,
    t1_b: ParamId,
    t2_w: ParamId,
    t2_b: ParamId,
    blocks: Vec<Block>,
    fin_ada_w: ParamId,
    fin_ada_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub layout: InputLayout,
    pub params: ParamStore<T>,
    ids: Ids,
}

/// Activations kept for [`Denoiser::backward`].
pub struct ForwardCache<T> {
    shape: [usize; 4],
    patches: Tensor<T>,
    temb: Tensor<T>,
    u1: Tensor<T>,
    g1: Tensor<T>,
    c: Tensor<T>,
    cond: Tensor<T>,
    rope: RopeTable,
    blocks: Vec<BlockCache<T>>,
    fin_mod: Tensor<T>,
    fin_xhat: Tensor<T>,
    fin_norm: NormCache<T>,
    fin_a: Tensor<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, layout: InputLayout, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let p = config.patch;
        let c_in = layout.channels();
        let mut s = ParamStore::new();
        let pe_std = (1.0 / (c_in * p * p) as f64).sqrt();
        let pe_w = s.add("patch_embed.w", ParamGroup::PatchEmbed, Tensor::randn(&[d, c_in, 1, p, p], pe_std, rng));
        let pe_b = s.add("patch_embed.b", ParamGroup::PatchEmbed, Tensor::zeros(&[d]));
        let tf = config.time_freq_dim;
        let t1_w = s.add("time.fc1.w", ParamGroup::Base, Tensor::randn(&[d, tf], (1.0 / tf as f64).sqrt(), rng));
        let t1_b = s.add("time.fc1.b", ParamGroup::Base, Tensor::zeros(&[d]));
        let t2_w = s.add("time.fc2.w", ParamGroup::Base, Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng));
        let t2_b = s.add("time.fc2.b", ParamGroup::Base, Tensor::zeros(&[d]));
        let blocks = (0..config.blocks)
            .map(|i| {
                Block::new(
                    &mut s,
                    &format!("blocks.{i}"),
                    d,
                    config.heads,
                    d * config.ffn_mult,
                    config.lora_rank,
                    config.lora_alpha,
                    rng,
                )
            })
            .collect();
        let fin_ada_w = s.add("final.ada.w", ParamGroup::Base, Tensor::zeros(&[2 * d, d]));
        let fin_ada_b = s.add("final.ada.b", ParamGroup::Base, Tensor::zeros(&[2 * d]));
        let out_w = s.add("final.proj.w", ParamGroup::Base, Tensor::zeros(&[layout.latent_dim * p * p, d]));
        let out_b = s.add("final.proj.b", ParamGroup::Base, Tensor::zeros(&[layout.latent_dim * p * p]));
        Ok(Self {
            config,
            layout,
            params: s,
            ids: Ids {
                pe_w,
                pe_b,
                t1_w,
                t1_b,
                t2_w,
                t2_b,
                blocks,
                fin_ada_w,
                fin_ada_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            layout: self.layout,
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Patch-embedding weight viewed as a `[D, C p²]` matrix.
    fn pe_matrix(&self) -> Result<Tensor<T>> {
        let w = self.params.get(self.ids.pe_w);
        w.clone().reshape(&[w.dim(0), w.numel() / w.dim(0)])
    }

    /// Patch-embedding `x: [C, F, h, w]` into `[F (h/p) (w/p), D]` tokens.
    pub fn patch_embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = patchify(x, self.config.patch)?;
        linear(&patches, &self.pe_matrix()?, Some(self.params.get(self.ids.pe_b)))
    }

    fn check_shapes(&self, z_t: &Tensor<T>, cond: &ConditionBundle<T>) -> Result<[usize; 4]> {
        let s = z_t.shape();
        if s.len() != 4 || s[0] != self.layout.latent_dim {
            return Err(Error::shape("denoiser latents", s, &[self.layout.latent_dim]));
        }
        if cond.rays.dim(0) != self.layout.ray_channels {
            return Err(Error::shape("denoiser rays", cond.rays.shape(), &[self.layout.ray_channels]));
        }
        let p = self.config.patch;
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::invalid_shape("denoiser", format!("latent extent {:?} not divisible by patch {p}", &s[2..])));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Velocity prediction `[d_z, F, h, w]`.
    pub fn forward(&self, z_t: &Tensor<T>, cond: &ConditionBundle<T>, t: f64, mode: Reduction) -> Result<Tensor<T>> {
        Ok(self.forward_impl(z_t, cond, t, mode)?.0)
    }

    pub fn forward_train(&self, z_t: &Tensor<T>, cond: &ConditionBundle<T>, t: f64) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_impl(z_t, cond, t, Reduction::Fast)
    }

    fn forward_impl(
        &self,
        z_t: &Tensor<T>,
        cond: &ConditionBundle<T>,
        t: f64,
        mode: Reduction,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let shape = self.check_shapes(z_t, cond)?;
        let [dz, f, h, w] = shape;
        let p = self.config.patch;
        let x = build_input(z_t, cond)?;
        let patches = patchify(&x, p)?;
        let mut tok = linear(&patches, &self.pe_matrix()?, Some(self.params.get(self.ids.pe_b)))?;

        let temb = embedding_timestep::<T>(t, self.config.time_freq_dim)?;
        let u1 = linear(&temb, self.params.get(self.ids.t1_w), Some(self.params.get(self.ids.t1_b)))?;
        let g1 = gelu(&u1);
        let c = linear(&g1, self.params.get(self.ids.t2_w), Some(self.params.get(self.ids.t2_b)))?;
        let cact = gelu(&c);

        let rope = RopeTable::new(&self.config.rope, &token_positions(f, h / p, w / p));
        let mut caches = Vec::with_capacity(self.ids.blocks.len());
        for b in &self.ids.blocks {
            let (next, cache) = b.forward(&self.params, &tok, &cact, &rope, mode)?;
            caches.push(cache);
            tok = next;
        }
        let d = self.config.model_dim;
        let fin_mod = linear(&cact, self.params.get(self.ids.fin_ada_w), Some(self.params.get(self.ids.fin_ada_b)))?;
        let (fin_xhat, fin_norm) = layer_norm(&tok, None, None)?;
        let mut fin_a = fin_xhat.clone();
        {
            let m = fin_mod.data();
            for row in fin_a.data_mut().chunks_mut(d) {
                for i in 0..d {
                    row[i] = row[i] * (T::one() + m[d + i]) + m[i];
                }
            }
        }
        let out = linear(&fin_a, self.params.get(self.ids.out_w), Some(self.params.get(self.ids.out_b)))?;
        let v = unpatchify(&out, dz, f, h, w, p)?;
        Ok((
            v,
            ForwardCache {
                shape,
                patches,
                temb,
                u1,
                g1,
                c,
                cond: cact,
                rope,
                blocks: caches,
                fin_mod,
                fin_xhat,
                fin_norm,
                fin_a,
            },
        ))
    }

    /// Accumulates gradients of a scalar loss given `dv = dL/dv`.
    pub fn backward(&self, cache: &ForwardCache<T>, dv: &Tensor<T>, grads: &mut Grads<T>) -> Result<()> {
        let [_, f, h, w] = cache.shape;
        if dv.shape() != cache.shape {
            return Err(Error::shape("denoiser backward", dv.shape(), &cache.shape));
        }
        let p = self.config.patch;
        let d = self.config.model_dim;
        let dout = patchify(dv, p)?;
        let (dw, db) = grads.pair(self.ids.out_w, self.ids.out_b);
        let da = linear_backward(&cache.fin_a, self.params.get(self.ids.out_w), &dout, dw, db, true)?.expect("dx");

        let m = cache.fin_mod.data();
        let mut dmod = vec![T::zero(); 2 * d];
        let mut dxhat = da;
        for (row, xh) in dxhat.data_mut().chunks_mut(d).zip(cache.fin_xhat.data().chunks(d)) {
            for i in 0..d {
                dmod[i] += row[i];
                dmod[d + i] += row[i] * xh[i];
                row[i] *= T::one() + m[d + i];
            }
        }
        let mut dtok = layer_norm_backward(&cache.fin_norm, None, &dxhat, None, None)?;
        let dmod = Tensor::from_vec(&[2 * d], dmod)?;
        let (dw, db) = grads.pair(self.ids.fin_ada_w, self.ids.fin_ada_b);
        let mut dcond = linear_backward(&cache.cond, self.params.get(self.ids.fin_ada_w), &dmod, dw, db, true)?.expect("dx");

        for (i, b) in self.ids.blocks.iter().enumerate().rev() {
            let (dh, dc) = b.backward(&self.params, &cache.blocks[i], &cache.cond, &cache.rope, &dtok, grads)?;
            dcond.add_assign(&dc)?;
            dtok = dh;
        }

        // Time embedding MLP (only matters when its weights are tracked).
        if grads.is_tracked(self.ids.t1_w) || grads.is_tracked(self.ids.t2_w) {
            let dc = gelu_backward(&cache.c, &dcond)?;
            let (dw, db) = grads.pair(self.ids.t2_w, self.ids.t2_b);
            let dg1 = linear_backward(&cache.g1, self.params.get(self.ids.t2_w), &dc, dw, db, true)?.expect("dx");
            let du1 = gelu_backward(&cache.u1, &dg1)?;
            let (dw, db) = grads.pair(self.ids.t1_w, self.ids.t1_b);
            linear_backward(&cache.temb, self.params.get(self.ids.t1_w), &du1, dw, db, false)?;
        }

        // Patch embedding.
        let pe = self.pe_matrix()?;
        let mut dpe = grads.slot(self.ids.pe_w).map(|_| Tensor::zeros(pe.shape()));
        let db = grads.slot(self.ids.pe_b);
        linear_backward(&cache.patches, &pe, &dtok, dpe.as_mut(), db, false)?;
        if let (Some(acc), Some(g)) = (grads.slot(self.ids.pe_w), dpe) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let _ = (f, h, w);
        Ok(())
    }

    /// Folds every adapter into its base weight and zeroes `B`.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        for b in &self.ids.blocks {
            for l in b.lora_layers() {
                let eff = l.effective_weight(&self.params)?;
                *out.params.get_mut(l.w) = eff;
                out.params.get_mut(l.bb).fill(T::zero());
            }
        }
        Ok(out)
    }

    /// Parameter count of the trainable set under `mask`.
    pub fn trainable_count(&self, mask: GradMask) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| mask.allows(e.group))
            .map(|e| e.value.numel())
            .sum()
    }

    /// LoRA `B` matrices, for tests and diagnostics.
    pub fn lora_b_ids(&self) -> Vec<ParamId> {
        self.ids.blocks.iter().flat_map(|b| b.lora_layers().map(|l| l.bb)).collect()
    }
}
