//! Desk-scale lab for causal counterfactual image generation.
//!
//! The crate trains three pieces jointly on a synthetic world: a denoising
//! diffusion generator, a causal projector that reads generative factors off
//! noisy images, and a neural structural model over those factors with a
//! learned weighted adjacency. At inference time a deterministic reverse
//! sampler is steered by gradients of the projector/structural stack so that
//! the generated image realises a requested intervention on the factors.
//!
//! Everything runs on the CPU in `f64`, is seeded from a single integer, and
//! is bit-for-bit reproducible run to run.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod hash;
pub mod heads;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{CdlError, Result};
