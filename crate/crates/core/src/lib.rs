//! Gradient-guided stroke-to-image synthesis on a small latent diffusion
//! stack.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod imageio;
pub mod nets;
pub mod painting;
pub mod scenegen;
pub mod semctl;
pub mod service;
pub mod tensor;

pub use error::{Error, Result};
