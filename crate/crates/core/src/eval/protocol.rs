//! Sampling-based evaluation: novel-view metrics against a nearest-camera
//! baseline and the input-permutation protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{psnr, ssim};
use crate::conditioning::{view_inputs, CondOptions, Conditioner};
use crate::denoiser::Denoiser;
use crate::diffusion::{euler_sample, select_frames, sequence_noise, DenoiserVelocity, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Reduction, Tensor};
use crate::scenegen::ViewSet;
use crate::vae::{EncodingMode, Vae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub n_targets: usize,
    /// Input/target draws per scene.
    pub episodes: usize,
    pub n_perms: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 6,
            n_targets: 1,
            episodes: 4,
            n_perms: 10,
            seed: 1234,
        }
    }
}

/// A trained model plus the inference-time switches.
pub struct InferenceModel<'a> {
    pub vae: &'a Vae<f32>,
    pub model: &'a Denoiser<f32>,
    pub cond: CondOptions,
    pub sampler: SamplerConfig,
    pub reduction: Reduction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Target latents `[d_z, n, h, w]` in target order.
    pub latents: Tensor<f32>,
    pub images: Vec<Image>,
}

/// Noise-stream key of an input slot; targets live in a disjoint range.
fn input_key(frame: usize) -> u64 {
    frame as u64
}

fn target_key(frame: usize) -> u64 {
    (1 << 32) | frame as u64
}

impl InferenceModel<'_> {
    /// Samples the target views of `set` given its `inputs` frames. Each
    /// slot's noise is keyed by the frame it holds, so reordering inputs
    /// reorders their noise with them.
    pub fn predict(&self, set: &ViewSet, inputs: &[usize], targets: &[usize], seed: u64) -> Result<Prediction> {
        let v = &set.views[targets[0]];
        let cond = Conditioner::new(self.vae, self.cond, v.intrinsics.height, v.intrinsics.width)?;
        let c = cond.build(&view_inputs(set, None, inputs), &view_inputs(set, None, targets))?;
        let mut keys: Vec<u64> = match self.cond.encoding {
            EncodingMode::PerView => inputs.iter().map(|&f| input_key(f)).collect(),
            EncodingMode::Joint => (0..c.target_frames[0]).map(|tau| tau as u64).collect(),
        };
        keys.extend(targets.iter().map(|&f| target_key(f)));
        let lat = &c.bundle.latents;
        let noise = sequence_noise::<f32>(seed, &keys, lat.dim(0), lat.dim(2), lat.dim(3))?;
        let velocity = DenoiserVelocity {
            model: self.model,
            reduction: self.reduction,
        };
        let z = euler_sample(&velocity, &c.bundle, &noise, &self.sampler)?;
        let latents = select_frames(&z, &c.target_frames)?;
        let images = (0..targets.len())
            .map(|j| self.vae.decode_frame(&latents.gather(1, &[j])?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction { latents, images })
    }
}

/// Input whose camera center is closest to the target's; ties go to the
/// lower frame index.
pub fn nearest_input(set: &ViewSet, inputs: &[usize], target: usize) -> usize {
    let c = set.views[target].pose.center();
    *inputs
        .iter()
        .min_by(|&&a, &&b| {
            let da = (set.views[a].pose.center() - c).norm();
            let db = (set.views[b].pose.center() - c).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("at least one input")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Fixed draws of `k` inputs and `n_targets` targets per scene.
pub fn eval_episodes(sets: &[ViewSet], k: usize, n_targets: usize, per_scene: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(sets.len() * per_scene);
    for (s, set) in sets.iter().enumerate() {
        if set.views.len() < k + n_targets {
            return Err(Error::Invalid(format!(
                "scene {} has {} views, evaluation needs {}",
                set.scene_id,
                set.views.len(),
                k + n_targets
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(set.scene_id as u64);
        for _ in 0..per_scene {
            let mut pool: Vec<usize> = (0..set.views.len()).collect();
            let (chosen, _) = pool.partial_shuffle(&mut rng, k + n_targets);
            out.push(Episode {
                scene: s,
                inputs: chosen[..k].to_vec(),
                targets: chosen[k..].to_vec(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_std: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    pub per_scene: Vec<SceneMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over scenes of the per-scene spread (zero outside the
    /// permutation protocol).
    pub psnr_std: f64,
    pub ssim_std: f64,
    pub fingerprint: String,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation, so a single sample has spread 0.
/// Population standard deviation, computed on values shifted by the first
/// one so that identical values give exactly zero.
pub fn std_dev(v: &[f64]) -> f64 {
    let Some(&x0) = v.first() else { return 0.0 };
    let d: Vec<f64> = v.iter().map(|x| x - x0).collect();
    let m = mean(&d);
    (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d.len() as f64).sqrt()
}

impl MetricReport {
    pub fn from_scenes(label: &str, fingerprint: &str, per_scene: Vec<SceneMetrics>) -> Self {
        let col = |f: fn(&SceneMetrics) -> f64| mean(&per_scene.iter().map(f).collect::<Vec<_>>());
        Self {
            label: label.to_string(),
            psnr: col(|s| s.psnr),
            ssim: col(|s| s.ssim),
            psnr_std: col(|s| s.psnr_std),
            ssim_std: col(|s| s.ssim_std),
            per_scene,
            fingerprint: fingerprint.to_string(),
        }
    }
}

/// Short hash identifying a configuration.
pub fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
pub(crate) fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Scores of one episode: `(model psnr, model ssim, baseline psnr, baseline ssim)`
/// averaged over its targets.
fn score_episode(m: &InferenceModel<'_>, sets: &[ViewSet], ep: &Episode, seed: u64) -> Result<[f64; 4]> {
    let set = &sets[ep.scene];
    let pred = m.predict(set, &ep.inputs, &ep.targets, seed)?;
    let mut acc = [0.0; 4];
    for (img, &t) in pred.images.iter().zip(&ep.targets) {
        let gt = set.image(t)?;
        let base = set.image(nearest_input(set, &ep.inputs, t))?;
        acc[0] += psnr(img, gt)?;
        acc[1] += ssim(img, gt)?;
        acc[2] += psnr(base, gt)?;
        acc[3] += ssim(base, gt)?;
    }
    Ok(acc.map(|a| a / ep.targets.len() as f64))
}

/// Target-view PSNR/SSIM of the model and of the nearest-input baseline,
/// per scene then averaged.
pub fn nvs_eval(
    m: &InferenceModel<'_>,
    sets: &[ViewSet],
    cfg: &EvalConfig,
    label: &str,
    fingerprint: &str,
    threads: usize,
) -> Result<(MetricReport, MetricReport)> {
    let eps = eval_episodes(sets, cfg.k, cfg.n_targets, cfg.episodes, cfg.seed)?;
    let scores = par_map(&eps, threads, |ep| score_episode(m, sets, ep, cfg.seed))?;
    let mut model = Vec::new();
    let mut base = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        let rows: Vec<&[f64; 4]> = eps.iter().zip(&scores).filter(|(e, _)| e.scene == s).map(|(_, r)| r).collect();
        let col = |i: usize| mean(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
        let sm = |p, q| SceneMetrics {
            scene: set.scene_id,
            psnr: p,
            ssim: q,
            psnr_std: 0.0,
            ssim_std: 0.0,
        };
        model.push(sm(col(0), col(1)));
        base.push(sm(col(2), col(3)));
    }
    Ok((
        MetricReport::from_scenes(label, fingerprint, model),
        MetricReport::from_scenes("nearest input view", fingerprint, base),
    ))
}

/// Per-scene PSNR/SSIM across `n_perms` random orderings of one fixed
/// input set (noise travels with the views), then the mean and spread.
pub fn permutation_eval(
    m: &InferenceModel<'_>,
    sets: &[ViewSet],
    k: usize,
    n_perms: usize,
    seed: u64,
    label: &str,
    fingerprint: &str,
    threads: usize,
) -> Result<MetricReport> {
    if n_perms == 0 {
        return Err(Error::config("eval.n_perms", "must be at least 1"));
    }
    let eps = eval_episodes(sets, k, 1, 1, seed)?;
    let per_scene = par_map(&eps, threads, |ep| {
        let set = &sets[ep.scene];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        rng.set_stream(set.scene_id as u64);
        let gt = set.image(ep.targets[0])?;
        let mut ps = Vec::with_capacity(n_perms);
        let mut ss = Vec::with_capacity(n_perms);
        for _ in 0..n_perms {
            let mut order = ep.inputs.clone();
            order.shuffle(&mut rng);
            let pred = m.predict(set, &order, &ep.targets, seed)?;
            ps.push(psnr(&pred.images[0], gt)?);
            ss.push(ssim(&pred.images[0], gt)?);
        }
        Ok(SceneMetrics {
            scene: set.scene_id,
            psnr: mean(&ps),
            ssim: mean(&ss),
            psnr_std: std_dev(&ps),
            ssim_std: std_dev(&ss),
        })
    })?;
    Ok(MetricReport::from_scenes(label, fingerprint, per_scene))
}

/// Aligned plain-text table; perceptual columns are reported as n/a.
pub fn render_table(reports: &[MetricReport]) -> String {
    let w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<w$}  {:>8}  {:>8}  {:>9}  {:>9}  {:>6}  {:>8}  {}\n",
        "method", "PSNR", "SSIM", "PSNR std", "SSIM std", "LPIPS", "DreamSim", "config"
    );
    for r in reports {
        s += &format!(
            "{:<w$}  {:>8.3}  {:>8.4}  {:>9.4}  {:>9.5}  {:>6}  {:>8}  {}\n",
            r.label, r.psnr, r.ssim, r.psnr_std, r.ssim_std, "n/a", "n/a", r.fingerprint
        );
    }
    s
}

/// Comma-separated rows: aggregates first (`scene = all`), then per scene.
pub fn render_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method,scene,psnr,ssim,psnr_std,ssim_std,lpips,dreamsim,config\n");
    for r in reports {
        s += &format!("{},all,{},{},{},{},,,{}\n", r.label, r.psnr, r.ssim, r.psnr_std, r.ssim_std, r.fingerprint);
        for p in &r.per_scene {
            s += &format!(
                "{},{},{},{},{},{},,,{}\n",
                r.label, p.scene, p.psnr, p.ssim, p.psnr_std, p.ssim_std, r.fingerprint
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_has_zero_spread() {
        assert_eq!(std_dev(&[3.5]), 0.0);
        assert_eq!(std_dev(&[27.123456789; 10]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
