//! Optimization loop: staged training (full-model pretraining, then
//! adapter-only stages at increasing resolution), mixed input/target
//! counts, checkpoints and the per-step metrics log.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_views, view_inputs, Conditioner};
use crate::config::Config;
use crate::denoiser::Denoiser;
use crate::diffusion::{fm_loss, noise_sample, Supervision};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, GradMask, Grads, Tensor};
use crate::scenegen::{sample_training_views, ViewSet};
use crate::vae::Vae;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    /// Every denoiser weight trains.
    Full,
    /// Only LoRA pairs and the patch embedding train.
    Adapter,
}

impl StageMode {
    pub fn mask(self) -> GradMask {
        match self {
            StageMode::Full => GradMask {
                vae: false,
                ..GradMask::ALL
            },
            StageMode::Adapter => GradMask::ADAPTER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub mode: StageMode,
    /// Overrides `train.lr` for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

/// Variable split of a fixed-length sequence into inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixedMton {
    pub enabled: bool,
    pub t_total: usize,
    pub min_inputs: usize,
    pub max_inputs: usize,
}

impl Default for MixedMton {
    fn default() -> Self {
        Self {
            enabled: false,
            t_total: 10,
            min_inputs: 3,
            max_inputs: 9,
        }
    }
}

impl MixedMton {
    /// `(inputs, targets)` for one training sample.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let k = rng.random_range(self.min_inputs..=self.max_inputs);
        (k, self.t_total - k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Input views per sample.
    pub k: usize,
    pub n_targets: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Width of the contiguous window used by the local sampling branch.
    pub window_len: usize,
    pub supervision: Supervision,
    pub mixed_mton: MixedMton,
    pub stages: Vec<Stage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 6,
            n_targets: 1,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: 1.0,
            window_len: 8,
            supervision: Supervision::TargetOnly,
            mixed_mton: MixedMton::default(),
            stages: vec![
                Stage {
                    name: "pretrain".into(),
                    height: 32,
                    width: 48,
                    steps: 20_000,
                    mode: StageMode::Full,
                    lr: Some(1e-3),
                },
                Stage {
                    name: "stage1".into(),
                    height: 32,
                    width: 48,
                    steps: 5_000,
                    mode: StageMode::Adapter,
                    lr: None,
                },
                Stage {
                    name: "stage2".into(),
                    height: 64,
                    width: 96,
                    steps: 2_000,
                    mode: StageMode::Adapter,
                    lr: None,
                },
            ],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("train.k", "need at least one input view"));
        }
        if self.n_targets == 0 {
            return Err(Error::config("train.n_targets", "need at least one target"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be non-negative"));
        }
        let m = &self.mixed_mton;
        if m.enabled && (m.min_inputs == 0 || m.min_inputs > m.max_inputs || m.max_inputs >= m.t_total) {
            return Err(Error::config(
                "train.mixed_mton",
                "need 1 <= min_inputs <= max_inputs < t_total",
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::config("train.stages", "at least one stage is required"));
        }
        Ok(())
    }

    /// Longest sequence a training sample can have.
    pub fn max_sequence(&self) -> usize {
        if self.mixed_mton.enabled {
            self.mixed_mton.t_total
        } else {
            self.k + self.n_targets
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage index active at global `step`, if any.
    pub fn stage_at(&self, step: usize) -> Option<usize> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.steps;
            if step < end {
                return Some(i);
            }
        }
        None
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub vae: Vae<f32>,
    pub model: Denoiser<f32>,
    pub opt: AdamW,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: Config, vae: Vae<f32>) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(1);
        let layout = config.cond.layout(vae.latent_dim());
        let model = Denoiser::new(config.model.clone(), layout, &mut init)?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: config.train.lr,
                weight_decay: config.train.weight_decay,
                ..AdamWConfig::default()
            },
            &model.params,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Self {
            config,
            vae,
            model,
            opt,
            step: 0,
            rng,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.train.total_steps()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub stage: String,
}

impl StepRecord {
    /// `step loss lr stage`, the metrics-file line.
    pub fn line(&self) -> String {
        format!("{} {:.8e} {:.6e} {}", self.step, self.loss, self.lr, self.stage)
    }
}

/// Images of every scene at a requested resolution.
pub type DataSource<'a> = dyn Fn(usize, usize) -> Result<Vec<ViewSet>> + 'a;

struct StageData {
    index: usize,
    sets: Vec<ViewSet>,
    latents: Vec<Vec<Tensor<f32>>>,
    placeholder: Tensor<f32>,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    data: &'a DataSource<'a>,
    stage: Option<StageData>,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, data: &'a DataSource<'a>) -> Self {
        Self {
            state,
            data,
            stage: None,
        }
    }

    fn prepare_stage(&mut self, index: usize) -> Result<()> {
        if self.stage.as_ref().is_some_and(|s| s.index == index) {
            return Ok(());
        }
        let st = &self.state.config.train.stages[index];
        let sets = (self.data)(st.height, st.width)?;
        let need = self.state.config.train.max_sequence();
        if sets.is_empty() {
            return Err(Error::Invalid("training dataset is empty".into()));
        }
        if let Some(s) = sets.iter().find(|s| s.views.len() < need) {
            return Err(Error::Invalid(format!(
                "scene {} has {} frames but training sequences need {need}",
                s.scene_id,
                s.views.len()
            )));
        }
        let latents = encode_views(&self.state.vae, &sets)?;
        let placeholder = self.state.vae.placeholder(st.height, st.width)?;
        self.stage = Some(StageData {
            index,
            sets,
            latents,
            placeholder,
        });
        Ok(())
    }

    fn current_lr(&self, stage: usize) -> f64 {
        let cfg = &self.state.config.train;
        let base = cfg.stages[stage].lr.unwrap_or(cfg.lr);
        if cfg.warmup_steps > 0 && self.state.step < cfg.warmup_steps {
            base * (self.state.step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            base
        }
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let index = self
            .state
            .config
            .train
            .stage_at(self.state.step)
            .ok_or_else(|| Error::Invalid("all training stages are complete".into()))?;
        self.prepare_stage(index)?;
        let data = self.stage.as_ref().expect("stage prepared");
        let state = &mut self.state;
        let cfg = &state.config.train;
        let stage = &cfg.stages[index];
        let cond = Conditioner::with_placeholder(&state.vae, state.config.cond, stage.height, stage.width, data.placeholder.clone())?;
        let mut grads = Grads::new(&state.model.params, stage.mode.mask());
        let inv_b = 1.0 / cfg.batch as f32;
        let mut loss_sum = 0.0;
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut ids = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let scene = state.rng.random_range(0..data.sets.len());
            let (k, n) = if cfg.mixed_mton.enabled {
                cfg.mixed_mton.draw(&mut state.rng)
            } else {
                (cfg.k, cfg.n_targets)
            };
            let set = &data.sets[scene];
            let pick = sample_training_views(set.views.len(), k, n, cfg.window_len, &mut state.rng)?;
            ids.push(format!("scene{}:{:?}->{:?}", set.scene_id, pick.inputs, pick.targets));
            let cache = Some(data.latents[scene].as_slice());
            let c = cond.build(&view_inputs(set, cache, &pick.inputs), &view_inputs(set, cache, &pick.targets))?;
            let z0 = c.clean.as_ref().expect("training views carry images");
            let t: f64 = state.rng.random();
            ts.push(t);
            let eps = Tensor::<f32>::randn(z0.shape(), 1.0, &mut state.rng);
            let sample = noise_sample(z0, t, &eps)?;
            let (pred, fc) = state.model.forward_train(&sample.z_t, &c.bundle, t)?;
            let (loss, mut dpred) = fm_loss(&pred, &sample, c.bundle.is_input(), cfg.supervision)?;
            loss_sum += loss;
            dpred.scale(inv_b);
            state.model.backward(&fc, &dpred, &mut grads)?;
        }
        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                t: ts,
                batch: ids,
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.norm();
            if norm > cfg.grad_clip {
                grads.scale((cfg.grad_clip / norm) as f32);
            }
        }
        let stage_name = stage.name.clone();
        let lr = self.current_lr(index);
        let state = &mut self.state;
        state.opt.update(&mut state.model.params, &grads, lr);
        state.step += 1;
        Ok(StepRecord {
            step: state.step,
            loss,
            lr,
            stage: stage_name,
        })
    }

    /// Steps until `until` (or the end of the schedule), writing one metrics
    /// line per step when `log` is given.
    pub fn run(&mut self, until: Option<usize>, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let end = until.unwrap_or(usize::MAX).min(self.state.config.train.total_steps());
        let mut out = Vec::new();
        while self.state.step < end {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.line()).map_err(|e| Error::io("<metrics>", e))?;
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// Trains from scratch through every configured stage.
pub fn run_training(
    config: Config,
    vae: Vae<f32>,
    data: &DataSource<'_>,
    log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(TrainState::new(config, vae)?, data);
    trainer.run(None, log)?;
    Ok(trainer.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_counts_are_uniform_over_range() {
        let m = MixedMton {
            enabled: true,
            ..MixedMton::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hist = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            let (k, t) = m.draw(&mut rng);
            assert_eq!(k + t, 10);
            hist[k] += 1;
        }
        for (k, &c) in hist.iter().enumerate() {
            let f = c as f64 / n as f64;
            if (3..=9).contains(&k) {
                assert!((f - 1.0 / 7.0).abs() < 0.01, "k={k} f={f}");
            } else {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn stage_lookup() {
        let mut c = TrainConfig::default();
        for (s, n) in c.stages.iter_mut().zip([2, 3, 1]) {
            s.steps = n;
        }
        let got: Vec<_> = (0..7).map(|i| c.stage_at(i)).collect();
        assert_eq!(got, [Some(0), Some(0), Some(1), Some(1), Some(1), Some(2), None]);
    }
}
