//! Dense math substrate: matrices, parameter vectors, the MLP denoiser,
//! Adam and a finite-difference checker.

mod adam;
pub mod gradcheck;
mod matrix;
mod mlp;
mod param;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{time_embedding, Activation, ForwardCache, Mlp, MlpConfig, COND_EMBED, LAST_LAYER, OUT_BIAS, OUT_WEIGHT};
pub use param::{LayerDesc, ParamVector, Tensor};
