//! Differentiable primitive layer: tensors, forward/backward kernels, the
//! finite-difference oracle and parameter/optimizer plumbing.
//!
//! Every kernel is single-threaded with a fixed summation order, so repeated
//! calls on identical inputs are bit-identical.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod embedding;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod params;
pub mod tensor;

pub use activation::{gelu, gelu_backward};
pub use attention::{softmax_attention, softmax_attention_backward, AttentionCache, Reduction};
pub use conv::{conv3d, conv3d_backward, Conv3dSpec, ConvCache};
pub use embedding::embedding_timestep;
pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport, Stencil};
pub use linear::{linear, linear_backward};
pub use norm::{layer_norm, layer_norm_backward, NormCache};
pub use params::{AdamW, AdamWConfig, GradMask, Grads, ParamGroup, ParamId, ParamStore};
pub use tensor::{gemm, Real, Tensor};
