use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use permview_core::config::Config;
use permview_core::denoiser::{ConditionBundle, Denoiser, DenoiserConfig, InputLayout};
use permview_core::diffusion::{fm_loss, noise_sample, Supervision};
use permview_core::eval::{nvs_eval, EvalConfig, InferenceModel};
use permview_core::geometry::Frame;
use permview_core::numerics::{AdamW, AdamWConfig, GradMask, Grads, ParamGroup, Reduction, Tensor};
use permview_core::scenegen::{generate_dataset, DatasetConfig};
use permview_core::trainer::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainState, Trainer};
use permview_core::vae::Vae;
use permview_core::Error;

const TINY: &str = r#"
seed = 5
[data]
n_scenes = 2
frames_per_scene = 8
height = 16
width = 24
[vae.model]
latent_dim = 4
enc_channels = [4, 4, 4]
dec_channels = [4, 4, 4]
[model]
model_dim = 16
heads = 2
blocks = 1
lora_rank = 2
lora_alpha = 2.0
time_freq_dim = 8
[model.rope]
split = [2, 2, 4]
[train]
k = 3
batch = 2
window_len = 4
[[train.stages]]
name = "pretrain"
height = 16
width = 24
steps = 3
mode = "full"
lr = 1e-3
[[train.stages]]
name = "stage1"
height = 16
width = 24
steps = 2
mode = "adapter"
[sampler]
steps = 2
[eval]
k = 3
episodes = 1
"#;

fn tiny(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::from_toml(TINY, "tiny").unwrap().with_overrides(&o).unwrap()
}

fn fresh(cfg: Config) -> TrainState {
    let vae = Vae::new(cfg.vae.model.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    TrainState::new(cfg, vae).unwrap()
}

/// Renders the dataset a config asks for at any resolution.
fn source(cfg: &Config) -> impl Fn(usize, usize) -> permview_core::Result<Vec<permview_core::scenegen::ViewSet>> {
    let d = cfg.data.clone();
    move |h, w| generate_dataset(&d, h, w)
}

fn group_bits(st: &TrainState, group: ParamGroup) -> Vec<u32> {
    st.model
        .params
        .entries()
        .iter()
        .filter(|e| e.group == group)
        .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn resume_reproduces_the_next_loss_bit_exactly() {
    let cfg = tiny(&[]);
    let data = source(&cfg);
    let mut straight = Trainer::new(fresh(cfg.clone()), &data);
    let losses: Vec<f64> = straight.run(Some(4), None).unwrap().iter().map(|r| r.loss).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(fresh(cfg), &data);
    first.run(Some(2), None).unwrap();
    save_checkpoint(&first.state, &path).unwrap();
    let mut resumed = Trainer::new(load_checkpoint(&path).unwrap(), &data);
    let rest: Vec<f64> = resumed.run(Some(4), None).unwrap().iter().map(|r| r.loss).collect();
    assert_eq!(rest.len(), 2);
    assert_eq!(rest[0].to_bits(), losses[2].to_bits());
    assert_eq!(rest[1].to_bits(), losses[3].to_bits());
    assert_eq!(encode_checkpoint(&resumed.state), encode_checkpoint(&straight.state));
}

#[test]
fn identical_runs_give_identical_checkpoint_hashes() {
    let cfg = tiny(&[]);
    let data = source(&cfg);
    let hash = || {
        let mut t = Trainer::new(fresh(cfg.clone()), &data);
        t.run(None, None).unwrap();
        Sha256::digest(encode_checkpoint(&t.state))
    };
    assert_eq!(hash(), hash());
}

#[test]
fn adapter_stage_only_moves_lora_and_patch_embedding() {
    let cfg = tiny(&[]);
    let data = source(&cfg);
    let mut t = Trainer::new(fresh(cfg), &data);
    t.run(Some(3), None).unwrap();
    let before = t.state.clone();
    let recs = t.run(None, None).unwrap();
    assert!(recs.iter().all(|r| r.stage == "stage1"));
    assert_eq!(group_bits(&t.state, ParamGroup::Base), group_bits(&before, ParamGroup::Base));
    assert_eq!(t.state.vae, before.vae);
    assert_ne!(group_bits(&t.state, ParamGroup::Lora), group_bits(&before, ParamGroup::Lora));
    assert_ne!(group_bits(&t.state, ParamGroup::PatchEmbed), group_bits(&before, ParamGroup::PatchEmbed));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = tiny(&["train.stages.0.lr=0.0", "train.warmup_steps=0"]);
    let data = source(&cfg);
    let st = fresh(cfg);
    let before = st.model.params.clone();
    let mut t = Trainer::new(st, &data);
    let recs = t.run(Some(2), None).unwrap();
    assert!(recs.iter().all(|r| r.loss.is_finite()));
    assert_eq!(t.state.model.params, before);
}

#[test]
fn second_stage_runs_at_a_higher_resolution() {
    let cfg = tiny(&["train.stages.1.height=32", "train.stages.1.width=48"]);
    let data = source(&cfg);
    let mut t = Trainer::new(fresh(cfg), &data);
    let recs = t.run(None, None).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn too_short_scenes_are_rejected() {
    let o = vec!["data.frames_per_scene=3".to_string()];
    let err = Config::from_toml(TINY, "tiny").unwrap().with_overrides(&o).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "data.frames_per_scene"), "{err}");

    // A data source that disagrees with the config is caught at the first step.
    let cfg = tiny(&[]);
    let short = DatasetConfig {
        frames_per_scene: 3,
        ..cfg.data.clone()
    };
    let data = move |h, w| generate_dataset(&short, h, w);
    let mut t = Trainer::new(fresh(cfg), &data);
    assert!(t.train_step().is_err());
}

#[test]
fn corrupted_checkpoint_fails_the_integrity_check() {
    let bytes = encode_checkpoint(&fresh(tiny(&[])));
    for at in [bytes.len() / 3, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))), "flip at {at}");
    }
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_))));
}

#[test]
fn single_sample_overfits() {
    let mut cfg = DenoiserConfig {
        model_dim: 16,
        heads: 2,
        blocks: 1,
        lora_rank: 2,
        lora_alpha: 2.0,
        time_freq_dim: 8,
        ..DenoiserConfig::default()
    };
    cfg.rope.split = [2, 2, 4];
    let layout = InputLayout {
        latent_dim: 4,
        ray_channels: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Denoiser::<f32>::new(cfg, layout, &mut rng).unwrap();
    let shape = [4, 3, 4, 6];
    let z0: Tensor<f32> = Tensor::randn(&shape, 1.0, &mut rng);
    let eps = Tensor::randn(&shape, 1.0, &mut rng);
    let cond = ConditionBundle::new(z0.clone(), vec![true, true, false], Tensor::randn(&[6, 3, 4, 6], 1.0, &mut rng), Frame::QueryCentered).unwrap();
    let sample = noise_sample(&z0, 0.6, &eps).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let mut losses = Vec::new();
    for _ in 0..=500 {
        let (pred, cache) = model.forward_train(&sample.z_t, &cond, sample.t).unwrap();
        let (loss, dpred) = fm_loss(&pred, &sample, cond.is_input(), Supervision::TargetOnly).unwrap();
        losses.push(loss);
        let mut grads = Grads::new(&model.params, GradMask::ALL);
        model.backward(&cache, &dpred, &mut grads).unwrap();
        opt.update(&mut model.params, &grads, 3e-3);
    }
    assert!(losses[500] < 0.1 * losses[0], "{} -> {}", losses[0], losses[500]);
}

#[test]
fn fewer_inputs_than_trained_still_evaluate() {
    let cfg = tiny(&["train.k=6", "train.window_len=8"]);
    let data = source(&cfg);
    let mut t = Trainer::new(fresh(cfg.clone()), &data);
    t.run(Some(1), None).unwrap();
    let sets = data(16, 24).unwrap();
    let m = InferenceModel {
        vae: &t.state.vae,
        model: &t.state.model,
        cond: cfg.cond,
        sampler: cfg.sampler.clone(),
        reduction: Reduction::Canonical,
    };
    let eval = EvalConfig { k: 3, ..cfg.eval.clone() };
    let (model, base) = nvs_eval(&m, &sets, &eval, "k3", "", 1).unwrap();
    assert_eq!(model.per_scene.len(), 2);
    assert!(model.psnr.is_finite() && base.psnr.is_finite());
}

#[test]
fn mixed_training_steps_run() {
    let cfg = tiny(&[
        "train.mixed_mton.enabled=true",
        "train.mixed_mton.t_total=6",
        "train.mixed_mton.min_inputs=2",
        "train.mixed_mton.max_inputs=5",
    ]);
    let data = source(&cfg);
    let mut t = Trainer::new(fresh(cfg), &data);
    assert!(t.run(Some(3), None).unwrap().iter().all(|r| r.loss.is_finite()));
}
