//! Sequential conv / GELU / upsample stack with a hand-written backward pass.

use crate::error::Result;
use crate::numerics::conv::{upsample_nearest, upsample_nearest_backward};
use crate::numerics::{conv3d, conv3d_backward, gelu, gelu_backward, Conv3dSpec, ConvCache, Grads, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv { w: ParamId, b: ParamId, spec: Conv3dSpec },
    Gelu,
    Upsample(usize),
}

pub(crate) enum LayerCache<T> {
    Conv(ConvCache<T>),
    Gelu(Tensor<T>),
    Upsample,
}

pub(crate) fn forward<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    x: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut h = x.clone();
    let mut caches = Vec::new();
    for layer in layers {
        h = match layer {
            Layer::Conv { w, b, spec } => {
                let (y, c) = conv3d(&h, store.get(*w), Some(store.get(*b)), spec)?;
                if keep {
                    caches.push(LayerCache::Conv(c));
                }
                y
            }
            Layer::Gelu => {
                let y = gelu(&h);
                if keep {
                    caches.push(LayerCache::Gelu(h));
                }
                y
            }
            Layer::Upsample(f) => {
                if keep {
                    caches.push(LayerCache::Upsample);
                }
                upsample_nearest(&h, *f)
            }
        };
    }
    Ok((h, caches))
}

/// Accumulates parameter gradients into `grads` (if tracked) and returns the
/// input gradient when `need_dx`.
pub(crate) fn backward<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    caches: &[LayerCache<T>],
    dy: Tensor<T>,
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let mut g = dy;
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let last = i == 0;
        g = match (layer, cache) {
            (Layer::Conv { w, b, spec }, LayerCache::Conv(c)) => {
                let (dw, db) = grads.pair(*w, *b);
                let want_dx = !last || need_dx;
                match conv3d_backward(store.get(*w), c, &g, spec, dw, db, want_dx)? {
                    Some(dx) => dx,
                    None => return Ok(None),
                }
            }
            (Layer::Gelu, LayerCache::Gelu(x)) => gelu_backward(x, &g)?,
            (Layer::Upsample(f), LayerCache::Upsample) => upsample_nearest_backward(&g, *f),
            _ => unreachable!("cache does not match layer"),
        };
    }
    Ok(Some(g))
}
