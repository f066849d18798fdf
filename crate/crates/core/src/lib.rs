//! Permutation-invariant novel view synthesis on synthetic scenes: a causal
//! 3-D VAE, a ray-conditioned diffusion transformer with LoRA adapters,
//! flow-matching training and evaluation.

pub mod codec;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod image;
pub mod numerics;
pub mod scenegen;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
