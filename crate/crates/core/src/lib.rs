//! Two-timestep diffusion over aligned motion and frame-level text.
//!
//! Motion frames and per-frame text embeddings are noised with independent
//! timesteps, which lets one trained denoiser handle text-to-motion (frame-level,
//! sequence-level or both), motion-to-text, and joint generation.

pub mod cli;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
