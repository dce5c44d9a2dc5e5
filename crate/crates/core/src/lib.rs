//! Anti-personalization toolkit around a miniature text-conditional latent
//! diffusion model.
//!
//! The crate trains a small LDM from scratch, fine-tunes personalized copies
//! on subject image sets, and crafts imperceptible adversarial perturbations
//! that degrade what such a fine-tune can learn — alternating spatial-domain
//! (pixel PGD) and frequency-domain (blockwise DCT) updates, optionally gated
//! by a cross-attention attribution mask.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod ddpl;
pub mod error;
pub mod fpl;
pub mod imageio;
pub mod ldm;
pub mod localization;
pub mod metrics;
pub mod nn;
pub mod personalization;
pub mod pipeline;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod spl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
