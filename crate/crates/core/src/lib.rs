//! Few-shot anomaly image generation on a latent-diffusion substrate.
//!
//! The pipeline: pretrain a small autoencoder, fine-tune a cross-attention
//! U-Net with separated guidance losses on a handful of defect examples,
//! train a mask-refinement head on top, then sample aligned image/mask pairs
//! and score them.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod featnet;
pub mod imagedata;
pub mod inference;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod rmp;
pub mod schedule;
pub mod synthdata;
pub mod trainer;
pub mod unet;
pub mod util;
pub mod vae;

pub use error::{Result, SeasError};
