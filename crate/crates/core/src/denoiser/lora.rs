//! Linear layers with a low-rank adapter: `y = x (W + s B A)^T + b`,
//! `s = alpha / rank`. `B` starts at zero so a fresh adapter changes nothing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{gemm, linear, linear_backward, Grads, ParamGroup, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LoraLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub a: ParamId,
    pub bb: ParamId,
    pub scale: f64,
}

pub(crate) struct LoraCache<T> {
    x: Tensor<T>,
    xa: Tensor<T>,
}

impl LoraLinear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        out: usize,
        inp: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), ParamGroup::Base, Tensor::randn(&[out, inp], std, rng)),
            b: store.add(format!("{name}.b"), ParamGroup::Base, Tensor::zeros(&[out])),
            a: store.add(format!("{name}.lora_a"), ParamGroup::Lora, Tensor::randn(&[rank, inp], std, rng)),
            bb: store.add(format!("{name}.lora_b"), ParamGroup::Lora, Tensor::zeros(&[out, rank])),
            scale: alpha / rank as f64,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LoraCache<T>)> {
        let mut y = linear(x, store.get(self.w), Some(store.get(self.b)))?;
        let xa = linear(x, store.get(self.a), None)?;
        let bw = store.get(self.bb);
        let (n, r, out) = (xa.numel() / bw.dim(1), bw.dim(1), bw.dim(0));
        gemm(n, r, out, T::lit(self.scale), xa.data(), false, bw.data(), true, T::one(), y.data_mut());
        Ok((y, LoraCache { x: x.clone(), xa }))
    }

    /// Accumulates tracked parameter gradients, returns `dx`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &LoraCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (dw, db) = grads.pair(self.w, self.b);
        let mut dx = linear_backward(&cache.x, store.get(self.w), dy, dw, db, true)?.expect("dx requested");
        let bw = store.get(self.bb);
        let (out, r) = (bw.dim(0), bw.dim(1));
        let n = dy.numel() / out;
        let s = T::lit(self.scale);
        if let Some(dbb) = grads.slot(self.bb) {
            // dB += s dy^T (x A^T)
            gemm(out, n, r, s, dy.data(), true, cache.xa.data(), false, T::one(), dbb.data_mut());
        }
        // d(xA^T) = s dy B
        let mut dxa = vec![T::zero(); n * r];
        gemm(n, out, r, s, dy.data(), false, bw.data(), false, T::zero(), &mut dxa);
        let dxa = Tensor::from_vec(cache.xa.shape(), dxa)?;
        let dxl = linear_backward(&cache.x, store.get(self.a), &dxa, grads.slot(self.a), None, true)?
            .expect("dx requested");
        dx.add_assign(&dxl)?;
        Ok(dx)
    }

    /// `W + s B A` as a plain weight.
    pub fn effective_weight<T: Real>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        lora_apply(store.get(self.w), store.get(self.a), store.get(self.bb), self.scale)
    }
}

/// `W_eff = W + scale · B A` for `W: [out, in]`, `A: [r, in]`, `B: [out, r]`.
pub fn lora_apply<T: Real>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if w.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.dim(1) != w.dim(1) || b.dim(0) != w.dim(0) || a.dim(0) != b.dim(1) {
        return Err(Error::shape("lora_apply", w.shape(), &[b.dim(0), a.dim(0), a.dim(1)]));
    }
    let (out, inp, r) = (w.dim(0), w.dim(1), a.dim(0));
    let mut eff = w.clone();
    gemm(out, r, inp, T::lit(scale), b.data(), false, a.data(), false, T::one(), eff.data_mut());
    Ok(eff)
}
