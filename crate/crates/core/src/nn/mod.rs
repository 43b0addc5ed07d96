//! Transformer denoiser over joint motion/text frame tokens, with hand-written
//! backward passes. Generic over `f32` (training, sampling) and `f64` (gradient checks).

pub mod denoiser;
pub mod layers;

pub use denoiser::{
    gradient_norm, init_weights, Denoiser, DenoiserConfig, DenoiserInput, DenoiserOutput, DenoiserWeights,
    ForwardCache, PREFIX_TOKENS,
};
pub use layers::{timestep_embedding, Real};
