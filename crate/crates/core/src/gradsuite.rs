//! Finite-difference checks for every differentiable op and for the
//! composed blocks built from them, in double precision.
//!
//! Each case packs its inputs and parameters into one flat vector and
//! differentiates a random linear functional `sum(w * y)` of the output,
//! so every output element contributes with a distinct weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::block::Block;
use crate::denoiser::lora::LoraLinear;
use crate::denoiser::{token_positions, ConditionBundle, Denoiser, DenoiserConfig, InputLayout, RopeConfig, RopeTable, TemporalRope};
use crate::diffusion::{fm_loss, noise_sample, Supervision};
use crate::error::Result;
use crate::geometry::Frame;
use crate::numerics::{
    conv3d, conv3d_backward, finite_diff_check_with, Stencil, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_attention, softmax_attention_backward, Conv3dSpec, GradCheckReport, GradMask, Grads,
    ParamStore, Reduction, Tensor,
};
use crate::numerics::conv::{upsample_nearest, upsample_nearest_backward};
use crate::vae::{train::vae_loss_and_grad, Vae, VaeConfig};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-7;
/// Tolerance for the flow-matching loss.
pub const LOSS_TOL: f64 = 1e-8;
/// Tolerance for composed blocks.
pub const COMPOSED_TOL: f64 = 1e-4;

const STEP: f64 = 1e-3;
const COMPOSED_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub report: GradCheckReport,
    pub tol: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol)
    }
}

impl std::fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passes() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} tol={:.0e}", self.report, self.tol)
    }
}

fn flat(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflat(template: &[Tensor<f64>], p: &[f64]) -> Vec<Tensor<f64>> {
    let mut off = 0;
    template
        .iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::from_vec(t.shape(), p[off..off + n].to_vec()).expect("same shape");
            off += n;
            out
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `f`, which maps tensors to `(value, gradients)`, at `at`.
fn check_tensors(
    op: &str,
    at: Vec<Tensor<f64>>,
    h: f64,
    stride: usize,
    f: impl Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
) -> Result<GradCheckReport> {
    let (_, grads) = f(&at)?;
    let p = flat(&at);
    let analytic = flat(&grads);
    let idx: Vec<usize> = (0..p.len()).step_by(stride.max(1)).collect();
    Ok(finite_diff_check_with(
        op,
        |q| f(&unflat(&at, q)).expect("objective stays evaluable").0,
        &p,
        &analytic,
        h,
        Some(&idx),
        Stencil::FourthOrder,
    ))
}

/// Checks a parameter store (all groups) through `f(store) -> (value, grads)`.
fn check_store(
    op: &str,
    store: &ParamStore<f64>,
    h: f64,
    stride: usize,
    f: impl Fn(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
) -> Result<GradCheckReport> {
    let (_, g) = f(store)?;
    let analytic = g.flatten(store);
    let p = store.flatten();
    let idx: Vec<usize> = (0..p.len()).step_by(stride.max(1)).collect();
    let mut probe = store.clone();
    Ok(finite_diff_check_with(
        op,
        |q| {
            probe.unflatten(q);
            f(&probe).expect("objective stays evaluable").0
        },
        &p,
        &analytic,
        h,
        Some(&idx),
        Stencil::FourthOrder,
    ))
}

/// Output weights scaled so the objective stays of order one. The
/// cancellation error of the difference quotient grows with the
/// objective's magnitude, and some gradients are exactly zero (key
/// biases under softmax shift invariance), where only that error shows.
fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::randn(shape, 1.0 / n as f64, rng)
}

fn randomize(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        e.value = Tensor::randn(e.value.shape(), std, rng);
    }
}

fn primitives(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();

    let wy = weights(&[5, 4], rng);
    out.push(check_tensors(
        "linear",
        vec![Tensor::randn(&[5, 7], 1.0, rng), Tensor::randn(&[4, 7], 0.5, rng), Tensor::randn(&[4], 0.5, rng)],
        STEP,
        1,
        |t| {
            let y = linear(&t[0], &t[1], Some(&t[2]))?;
            let mut dw = Tensor::zeros(t[1].shape());
            let mut db = Tensor::zeros(t[2].shape());
            let dx = linear_backward(&t[0], &t[1], &wy, Some(&mut dw), Some(&mut db), true)?.expect("dx");
            Ok((dot(&y, &wy), vec![dx, dw, db]))
        },
    )?);

    for (name, spec) in [
        ("conv3d (causal, stride 2)", Conv3dSpec::causal([2, 2, 2], 1)),
        (
            "conv3d (symmetric)",
            Conv3dSpec {
                stride: [1, 1, 1],
                padding: [1, 1, 1],
                causal_time: false,
            },
        ),
    ] {
        let x = Tensor::randn(&[2, 5, 6, 6], 1.0, rng);
        let w = Tensor::randn(&[3, 2, 3, 3, 3], 0.3, rng);
        let b = Tensor::randn(&[3], 0.3, rng);
        let (y0, _) = conv3d(&x, &w, Some(&b), &spec)?;
        let wy = weights(y0.shape(), rng);
        out.push(check_tensors(name, vec![x, w, b], STEP, 1, |t| {
            let (y, cache) = conv3d(&t[0], &t[1], Some(&t[2]), &spec)?;
            let mut dw = Tensor::zeros(t[1].shape());
            let mut db = Tensor::zeros(t[2].shape());
            let dx = conv3d_backward(&t[1], &cache, &wy, &spec, Some(&mut dw), Some(&mut db), true)?.expect("dx");
            Ok((dot(&y, &wy), vec![dx, dw, db]))
        })?);
    }

    let wy = weights(&[4, 8], rng);
    out.push(check_tensors(
        "layer_norm",
        vec![Tensor::randn(&[4, 8], 1.0, rng), Tensor::randn(&[8], 1.0, rng), Tensor::randn(&[8], 1.0, rng)],
        STEP,
        1,
        |t| {
            let (y, cache) = layer_norm(&t[0], Some(&t[1]), Some(&t[2]))?;
            let mut dg = Tensor::zeros(t[1].shape());
            let mut db = Tensor::zeros(t[2].shape());
            let dx = layer_norm_backward(&cache, Some(&t[1]), &wy, Some(&mut dg), Some(&mut db))?;
            Ok((dot(&y, &wy), vec![dx, dg, db]))
        },
    )?);

    let wy = weights(&[24], rng);
    out.push(check_tensors("gelu", vec![Tensor::randn(&[24], 2.0, rng)], STEP, 1, |t| {
        Ok((dot(&gelu(&t[0]), &wy), vec![gelu_backward(&t[0], &wy)?]))
    })?);

    let wy = weights(&[5, 3], rng);
    out.push(check_tensors(
        "softmax_attention",
        vec![Tensor::randn(&[5, 4], 1.0, rng), Tensor::randn(&[6, 4], 1.0, rng), Tensor::randn(&[6, 3], 1.0, rng)],
        STEP,
        1,
        |t| {
            let (y, cache) = softmax_attention(&t[0], &t[1], &t[2], Reduction::Fast)?;
            let (dq, dk, dv) = softmax_attention_backward(&t[0], &t[1], &t[2], &cache, &wy)?;
            Ok((dot(&y, &wy), vec![dq, dk, dv]))
        },
    )?);

    let wy = weights(&[2, 2, 6, 4], rng);
    out.push(check_tensors("upsample_nearest", vec![Tensor::randn(&[2, 2, 3, 2], 1.0, rng)], STEP, 1, |t| {
        Ok((dot(&upsample_nearest(&t[0], 2), &wy), vec![upsample_nearest_backward(&wy, 2)]))
    })?);

    let rope_cfg = RopeConfig {
        split: [2, 2, 4],
        temporal: TemporalRope::Standard,
        base: 100.0,
    };
    let positions = token_positions(2, 2, 3);
    let table = RopeTable::new(&rope_cfg, &positions);
    let n = positions.len();
    let wy = weights(&[n, 8], rng);
    out.push(check_tensors("rope", vec![Tensor::randn(&[n, 8], 1.0, rng)], STEP, 1, |t| {
        let mut y = t[0].clone();
        table.apply(y.data_mut(), n, 8, 0, false);
        let mut dx = wy.clone();
        table.apply(dx.data_mut(), n, 8, 0, true);
        Ok((dot(&y, &wy), vec![dx]))
    })?);

    let mut store = ParamStore::new();
    let layer = LoraLinear::new(&mut store, "lora", 5, 6, 3, 6.0, rng);
    randomize(&mut store, 0.5, rng);
    let x = Tensor::randn(&[4, 6], 1.0, rng);
    let wy = weights(&[4, 5], rng);
    let mut at = vec![x];
    at.extend(store.entries().iter().map(|e| e.value.clone()));
    out.push(check_tensors("lora linear", at, STEP, 1, |t| {
        let mut s = store.clone();
        for (e, v) in s.entries_mut().iter_mut().zip(&t[1..]) {
            e.value = v.clone();
        }
        let (y, cache) = layer.forward(&s, &t[0])?;
        let mut g = Grads::new(&s, GradMask::ALL);
        let dx = layer.backward(&s, &cache, &wy, &mut g)?;
        let mut grads = vec![dx];
        grads.extend((0..s.len()).map(|i| g.get(i).expect("all tracked").clone()));
        Ok((dot(&y, &wy), grads))
    })?);

    // Patch embedding as used by the denoiser: patchify, then a linear map.
    let (c, f, hh, ww, p, d) = (3, 2, 4, 4, 2, 5);
    let wy = weights(&[f * (hh / p) * (ww / p), d], rng);
    out.push(check_tensors(
        "patch_embed",
        vec![
            Tensor::randn(&[c, f, hh, ww], 1.0, rng),
            Tensor::randn(&[d, c * p * p], 0.5, rng),
            Tensor::randn(&[d], 0.5, rng),
        ],
        STEP,
        1,
        |t| {
            let patches = crate::denoiser::patchify(&t[0], p)?;
            let y = linear(&patches, &t[1], Some(&t[2]))?;
            let mut dw = Tensor::zeros(t[1].shape());
            let mut db = Tensor::zeros(t[2].shape());
            let dp = linear_backward(&patches, &t[1], &wy, Some(&mut dw), Some(&mut db), true)?.expect("dx");
            let dx = crate::denoiser::unpatchify(&dp, c, f, hh, ww, p)?;
            Ok((dot(&y, &wy), vec![dx, dw, db]))
        },
    )?);
    Ok(out)
}

fn loss(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let z0 = Tensor::randn(&[2, 3, 2, 2], 1.0, rng);
    let eps = Tensor::randn(&[2, 3, 2, 2], 1.0, rng);
    let sample = noise_sample(&z0, 0.35, &eps)?;
    let is_input = [true, false, false];
    check_tensors("fm_loss", vec![Tensor::randn(&[2, 3, 2, 2], 1.0, rng)], STEP, 1, |t| {
        let (l, g) = fm_loss(&t[0], &sample, &is_input, Supervision::TargetOnly)?;
        Ok((l, vec![g]))
    })
}

fn toy_denoiser(rng: &mut ChaCha8Rng) -> Result<(Denoiser<f64>, Tensor<f64>, ConditionBundle<f64>)> {
    let cfg = DenoiserConfig {
        model_dim: 16,
        heads: 2,
        blocks: 2,
        ffn_mult: 2,
        patch: 2,
        lora_rank: 4,
        lora_alpha: 4.0,
        time_freq_dim: 8,
        rope: RopeConfig {
            split: [2, 2, 4],
            temporal: TemporalRope::Zero,
            base: 100.0,
        },
    };
    let layout = InputLayout {
        latent_dim: 2,
        ray_channels: 3,
    };
    let mut m = Denoiser::<f64>::new(cfg, layout, rng)?;
    randomize(&mut m.params, 0.3, rng);
    let z = Tensor::randn(&[2, 3, 4, 4], 1.0, rng);
    let cond = ConditionBundle::new(
        Tensor::randn(&[2, 3, 4, 4], 1.0, rng),
        vec![true, true, false],
        Tensor::randn(&[3, 3, 4, 4], 1.0, rng),
        Frame::QueryCentered,
    )?;
    Ok((m, z, cond))
}

fn composed(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();

    // One transformer block: token states, conditioning vector and weights.
    let (d, heads) = (16, 2);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "block", d, heads, 24, 2, 2.0, rng);
    randomize(&mut store, 0.3, rng);
    let positions = token_positions(2, 2, 2);
    let rope = RopeTable::new(
        &RopeConfig {
            split: [2, 2, 4],
            temporal: TemporalRope::Zero,
            base: 100.0,
        },
        &positions,
    );
    let n = positions.len();
    let wy = weights(&[n, d], rng);
    let mut at = vec![Tensor::randn(&[n, d], 1.0, rng), Tensor::randn(&[d], 1.0, rng)];
    at.extend(store.entries().iter().map(|e| e.value.clone()));
    out.push(check_tensors("attention block", at, COMPOSED_STEP, 1, |t| {
        let mut s = store.clone();
        for (e, v) in s.entries_mut().iter_mut().zip(&t[2..]) {
            e.value = v.clone();
        }
        let (y, cache) = block.forward(&s, &t[0], &t[1], &rope, Reduction::Fast)?;
        let mut g = Grads::new(&s, GradMask::ALL);
        let (dh, dc) = block.backward(&s, &cache, &t[1], &rope, &wy, &mut g)?;
        let mut grads = vec![dh, dc];
        grads.extend((0..s.len()).map(|i| g.get(i).expect("all tracked").clone()));
        Ok((dot(&y, &wy), grads))
    })?);

    let (m, z, cond) = toy_denoiser(rng)?;
    let wv = weights(z.shape(), rng);
    let t = 0.3;
    out.push(check_store("denoiser", &m.params, COMPOSED_STEP, 3, |s| {
        let mut probe = m.clone();
        probe.params = s.clone();
        let (v, cache) = probe.forward_train(&z, &cond, t)?;
        let mut g = Grads::new(s, GradMask::ALL);
        probe.backward(&cache, &wv, &mut g)?;
        Ok((dot(&v, &wv), g))
    })?);

    // Small latents keep the loss value, and with it the cancellation
    // error, of order 0.1.
    let z0 = Tensor::randn(z.shape(), 0.3, rng);
    let eps = Tensor::randn(z.shape(), 0.3, rng);
    let sample = noise_sample(&z0, t, &eps)?;
    out.push(check_store("loss through denoiser", &m.params, COMPOSED_STEP, 3, |s| {
        let mut probe = m.clone();
        probe.params = s.clone();
        let (v, cache) = probe.forward_train(&sample.z_t, &cond, t)?;
        let (l, dv) = fm_loss(&v, &sample, cond.is_input(), Supervision::TargetOnly)?;
        let mut g = Grads::new(s, GradMask::ALL);
        probe.backward(&cache, &dv, &mut g)?;
        Ok((l, g))
    })?);

    let vae = Vae::<f64>::new(
        VaeConfig {
            latent_dim: 2,
            enc_channels: [3, 4, 4],
            dec_channels: [4, 3, 3],
        },
        rng,
    )?;
    let x = Tensor::uniform(&[3, 1, 8, 8], -1.0, 1.0, rng);
    let eps = Tensor::randn(&[2, 1, 2, 2], 1.0, rng);
    out.push(check_store("vae loss", &vae.params, COMPOSED_STEP, 3, |s| {
        let mut probe = vae.clone();
        probe.params = s.clone();
        let mut g = Grads::new(s, GradMask::ALL);
        let l = vae_loss_and_grad(&probe, &x, &eps, 0.1, &mut g)?;
        Ok((l, g))
    })?);
    Ok(out)
}

/// Runs every check. Inputs are drawn from `seed`.
pub fn run_grad_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: Vec<SuiteEntry> = primitives(&mut rng)?
        .into_iter()
        .map(|report| SuiteEntry {
            report,
            tol: PRIMITIVE_TOL,
        })
        .collect();
    entries.push(SuiteEntry {
        report: loss(&mut rng)?,
        tol: LOSS_TOL,
    });
    entries.extend(composed(&mut rng)?.into_iter().map(|report| SuiteEntry {
        report,
        tol: COMPOSED_TOL,
    }));
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_is_within_tolerance() {
        let entries = run_grad_suite(0).unwrap();
        for e in &entries {
            println!("{e}");
        }
        assert!(entries.iter().all(SuiteEntry::passes));
    }
}
