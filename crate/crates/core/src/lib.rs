//! Mixture-of-experts voice conversion with sparse channel gating.
//!
//! The crate builds a gated-convolution VAE voice converter, adds per-layer
//! gating networks driven by utterance embeddings, and runs inference
//! through an engine that skips all work on channels whose gate is exactly
//! zero while counting every multiply-accumulate it performs.

pub mod acvae;
pub mod autodiff;
pub mod config;
pub mod conv;
pub mod error;
pub mod eval;
pub mod features;
pub mod gated_vae;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Real, Tensor};
