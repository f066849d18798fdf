//! One adaLN transformer block: modulated norm, multi-head self-attention
//! with RoPE, gated residual, modulated norm, GELU MLP, gated residual.

use rand::Rng;

use super::lora::{LoraCache, LoraLinear};
use super::rope::RopeTable;
use crate::error::Result;
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_attention,
    softmax_attention_backward, AttentionCache, Grads, NormCache, ParamGroup, ParamId, ParamStore, Real, Reduction,
    Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub fc1: LoraLinear,
    pub fc2: LoraLinear,
    pub heads: usize,
}

struct Modulated<T> {
    xhat: Tensor<T>,
    norm: NormCache<T>,
}

/// `LN(x) * (1 + scale) + shift` with per-feature `scale` / `shift`.
fn modulate<T: Real>(x: &Tensor<T>, shift: &[T], scale: &[T]) -> Result<(Tensor<T>, Modulated<T>)> {
    let (xhat, norm) = layer_norm(x, None, None)?;
    let d = shift.len();
    let mut y = xhat.clone();
    for row in y.data_mut().chunks_mut(d) {
        for i in 0..d {
            row[i] = row[i] * (T::one() + scale[i]) + shift[i];
        }
    }
    Ok((y, Modulated { xhat, norm }))
}

/// Returns `dx`; adds into `dshift` / `dscale`.
fn modulate_backward<T: Real>(
    cache: &Modulated<T>,
    scale: &[T],
    dy: &Tensor<T>,
    dshift: &mut [T],
    dscale: &mut [T],
) -> Result<Tensor<T>> {
    let d = scale.len();
    let mut dxhat = dy.clone();
    for (row, xh) in dxhat.data_mut().chunks_mut(d).zip(cache.xhat.data().chunks(d)) {
        for i in 0..d {
            dshift[i] += row[i];
            dscale[i] += row[i] * xh[i];
            row[i] *= T::one() + scale[i];
        }
    }
    layer_norm_backward(&cache.norm, None, &dxhat, None, None)
}

/// `h + gate * y` row-wise.
fn gated_add<T: Real>(h: &Tensor<T>, gate: &[T], y: &Tensor<T>) -> Tensor<T> {
    let d = gate.len();
    let mut out = h.clone();
    for (row, yr) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        for i in 0..d {
            row[i] += gate[i] * yr[i];
        }
    }
    out
}

/// Returns `dy = dh * gate`, adds `sum_n dh * y` into `dgate`.
fn gated_add_backward<T: Real>(dh: &Tensor<T>, gate: &[T], y: &Tensor<T>, dgate: &mut [T]) -> Tensor<T> {
    let d = gate.len();
    let mut dy = dh.clone();
    for (row, yr) in dy.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        for i in 0..d {
            dgate[i] += row[i] * yr[i];
            row[i] *= gate[i];
        }
    }
    dy
}

pub(crate) struct BlockCache<T> {
    modv: Tensor<T>,
    m1: Modulated<T>,
    q_c: LoraCache<T>,
    k_c: LoraCache<T>,
    v_c: LoraCache<T>,
    /// Rotated per-head q, k and plain v, each `[n, d]`.
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Vec<AttentionCache<T>>,
    o_c: LoraCache<T>,
    o: Tensor<T>,
    m2: Modulated<T>,
    fc1_c: LoraCache<T>,
    f1: Tensor<T>,
    fc2_c: LoraCache<T>,
    f2: Tensor<T>,
}

fn head_slice<T: Real>(x: &Tensor<T>, h: usize, dh: usize) -> Result<Tensor<T>> {
    let n = x.dim(0);
    let d = x.dim(1);
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x.data()[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    Tensor::from_vec(&[n, dh], out)
}

fn head_scatter<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, h: usize, dh: usize) {
    let d = dst.dim(1);
    for r in 0..src.dim(0) {
        dst.data_mut()[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src.data()[r * dh..(r + 1) * dh]);
    }
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let mut lora = |n: &str, out, inp, rng: &mut R| LoraLinear::new(store, &format!("{name}.{n}"), out, inp, rank, alpha, rng);
        let q = lora("attn.q", d, d, rng);
        let k = lora("attn.k", d, d, rng);
        let v = lora("attn.v", d, d, rng);
        let o = lora("attn.o", d, d, rng);
        let fc1 = lora("mlp.fc1", ffn, d, rng);
        let fc2 = lora("mlp.fc2", d, ffn, rng);
        Self {
            ada_w: store.add(format!("{name}.ada.w"), ParamGroup::Base, Tensor::zeros(&[6 * d, d])),
            ada_b: store.add(format!("{name}.ada.b"), ParamGroup::Base, Tensor::zeros(&[6 * d])),
            q,
            k,
            v,
            o,
            fc1,
            fc2,
            heads,
        }
    }

    pub fn lora_layers(&self) -> [&LoraLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2]
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        cond: &Tensor<T>,
        rope: &RopeTable,
        mode: Reduction,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (n, d) = (h.dim(0), h.dim(1));
        let dh = d / self.heads;
        let modv = linear(cond, store.get(self.ada_w), Some(store.get(self.ada_b)))?;
        let m = modv.data();
        let (shift1, scale1, gate1) = (&m[0..d], &m[d..2 * d], &m[2 * d..3 * d]);
        let (shift2, scale2, gate2) = (&m[3 * d..4 * d], &m[4 * d..5 * d], &m[5 * d..6 * d]);

        let (a1, m1) = modulate(h, shift1, scale1)?;
        let (mut q, q_c) = self.q.forward(store, &a1)?;
        let (mut k, k_c) = self.k.forward(store, &a1)?;
        let (v, v_c) = self.v.forward(store, &a1)?;
        for hd in 0..self.heads {
            rope.apply(q.data_mut(), n, d, hd * dh, false);
            rope.apply(k.data_mut(), n, d, hd * dh, false);
        }
        let mut att = Tensor::zeros(&[n, d]);
        let mut attn = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (y, c) = softmax_attention(
                &head_slice(&q, hd, dh)?,
                &head_slice(&k, hd, dh)?,
                &head_slice(&v, hd, dh)?,
                mode,
            )?;
            head_scatter(&mut att, &y, hd, dh);
            attn.push(c);
        }
        let (o, o_c) = self.o.forward(store, &att)?;
        let h1 = gated_add(h, gate1, &o);

        let (a2, m2) = modulate(&h1, shift2, scale2)?;
        let (f1, fc1_c) = self.fc1.forward(store, &a2)?;
        let (f2, fc2_c) = self.fc2.forward(store, &gelu(&f1))?;
        let h2 = gated_add(&h1, gate2, &f2);
        Ok((
            h2,
            BlockCache {
                modv,
                m1,
                q_c,
                k_c,
                v_c,
                q,
                k,
                v,
                attn,
                o_c,
                o,
                m2,
                fc1_c,
                f1,
                fc2_c,
                f2,
            },
        ))
    }

    /// Returns `(dh, dcond)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BlockCache<T>,
        cond: &Tensor<T>,
        rope: &RopeTable,
        dh2: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, d) = (dh2.dim(0), dh2.dim(1));
        let dh = d / self.heads;
        let m = cache.modv.data();
        let (scale1, gate1) = (&m[d..2 * d], &m[2 * d..3 * d]);
        let (scale2, gate2) = (&m[4 * d..5 * d], &m[5 * d..6 * d]);
        let mut dm = vec![T::zero(); 6 * d];

        // MLP branch.
        let (dm_a, dm_b) = dm.split_at_mut(3 * d);
        let df2 = gated_add_backward(dh2, gate2, &cache.f2, &mut dm_b[2 * d..3 * d]);
        let dg = self.fc2.backward(store, &cache.fc2_c, &df2, grads)?;
        let df1 = gelu_backward(&cache.f1, &dg)?;
        let da2 = self.fc1.backward(store, &cache.fc1_c, &df1, grads)?;
        let (dshift2, rest) = dm_b.split_at_mut(d);
        let mut dh1 = modulate_backward(&cache.m2, scale2, &da2, dshift2, &mut rest[..d])?;
        dh1.add_assign(dh2)?;

        // Attention branch.
        let do_ = gated_add_backward(&dh1, gate1, &cache.o, &mut dm_a[2 * d..3 * d]);
        let datt = self.o.backward(store, &cache.o_c, &do_, grads)?;
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        for hd in 0..self.heads {
            let (gq, gk, gv) = softmax_attention_backward(
                &head_slice(&cache.q, hd, dh)?,
                &head_slice(&cache.k, hd, dh)?,
                &head_slice(&cache.v, hd, dh)?,
                &cache.attn[hd],
                &head_slice(&datt, hd, dh)?,
            )?;
            head_scatter(&mut dq, &gq, hd, dh);
            head_scatter(&mut dk, &gk, hd, dh);
            head_scatter(&mut dv, &gv, hd, dh);
        }
        for hd in 0..self.heads {
            rope.apply(dq.data_mut(), n, d, hd * dh, true);
            rope.apply(dk.data_mut(), n, d, hd * dh, true);
        }
        let mut da1 = self.q.backward(store, &cache.q_c, &dq, grads)?;
        da1.add_assign(&self.k.backward(store, &cache.k_c, &dk, grads)?)?;
        da1.add_assign(&self.v.backward(store, &cache.v_c, &dv, grads)?)?;
        let (dshift1, rest) = dm_a.split_at_mut(d);
        let dh = modulate_backward(&cache.m1, scale1, &da1, dshift1, &mut rest[..d])?;
        dh1.add_assign(&dh)?;

        let dmod = Tensor::from_vec(&[6 * d], dm)?;
        let (dw, db) = grads.pair(self.ada_w, self.ada_b);
        let dcond = linear_backward(cond, store.get(self.ada_w), &dmod, dw, db, true)?.expect("dx requested");
        Ok((dh1, dcond))
    }
}
