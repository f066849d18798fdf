//! Training checkpoints: config snapshot, VAE, denoiser base and adapter
//! blocks (stored as separate sections), optimizer moments, step counter
//! and the data RNG position.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainState;
use crate::codec::{self, Decoder, Encoder};
use crate::config::Config;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamGroup};
use crate::vae::Vae;

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &[u8; 4] = b"TRN1";
const BASE: [ParamGroup; 2] = [ParamGroup::PatchEmbed, ParamGroup::Base];
const ADAPTER: [ParamGroup; 1] = [ParamGroup::Lora];

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut e = Encoder::new(KIND, CHECKPOINT_VERSION);
    e.str(&state.config.to_toml());
    e.u64(state.step as u64);
    for chunk in state.rng.get_seed().chunks(8) {
        e.u64(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    e.u64(state.rng.get_stream());
    let pos = state.rng.get_word_pos();
    e.u64(pos as u64);
    e.u64((pos >> 64) as u64);
    state.vae.write_into(&mut e);
    e.store_groups(&state.model.params, &BASE);
    e.store_groups(&state.model.params, &ADAPTER);
    let c = state.opt.config;
    e.f64s(&[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
    e.u64(state.opt.step);
    for (m, v) in state.opt.first.iter().zip(&state.opt.second) {
        e.f64s(m);
        e.f64s(v);
    }
    e.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut d = Decoder::open(bytes, KIND, "training checkpoint", CHECKPOINT_VERSION)?;
    let config = Config::from_toml(&d.str()?, "<checkpoint config>")?;
    let step = d.u64()? as usize;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&d.u64()?.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(d.u64()?);
    let lo = d.u64()? as u128;
    let hi = d.u64()? as u128;
    rng.set_word_pos(lo | (hi << 64));
    let vae = Vae::read_from(&mut d)?;
    let layout = config.cond.layout(vae.latent_dim());
    let mut model = Denoiser::new(config.model.clone(), layout, &mut ChaCha8Rng::seed_from_u64(0))?;
    d.store_groups_into(&mut model.params, &BASE)?;
    d.store_groups_into(&mut model.params, &ADAPTER)?;
    let c = d.f64s()?;
    if c.len() != 5 {
        return Err(Error::Integrity("optimizer config block is malformed".into()));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: c[0],
            beta1: c[1],
            beta2: c[2],
            eps: c[3],
            weight_decay: c[4],
        },
        &model.params,
    );
    opt.step = d.u64()?;
    for (i, e) in model.params.entries().iter().enumerate() {
        let (m, v) = (d.f64s()?, d.f64s()?);
        if m.len() != e.value.numel() || v.len() != e.value.numel() {
            return Err(Error::Integrity(format!("optimizer moments for `{}` have the wrong length", e.name)));
        }
        opt.first[i] = m;
        opt.second[i] = v;
    }
    d.finish()?;
    Ok(TrainState {
        config,
        vae,
        model,
        opt,
        step,
        rng,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&codec::read_file(path)?)
}
