//! Desk-scale laboratory for equivariance-regularized autoencoder latent
//! spaces.
//!
//! The crate trains small convolutional autoencoders (continuous KL or
//! discrete vector-quantized latents) on local image folders, optionally
//! regularizing the latent space so that spatial transformations of the
//! input (right-angle rotations and down-scaling) transfer to the latent
//! grid. Around the training objectives it provides the diagnostics needed
//! to study the latent geometry: equivariance error, PSNR/SSIM, a Fréchet
//! feature distance proxy, TwoNN intrinsic dimension, and PCA latent maps,
//! plus a toy latent denoising-diffusion model for judging how learnable a
//! latent distribution is.
//!
//! Start with [`harness`] for config-driven experiments or browse the
//! `examples/` directory for one runnable program per capability.

pub mod autoencoder;
pub mod error;
pub mod grid;
pub mod harness;
pub mod latentgen;
pub mod nn;
pub mod objectives;
pub mod probes;
pub mod transform2d;

pub use error::{Error, Result};
pub use grid::FeatureGrid;
pub use transform2d::{Transform2D, TransformSamplerConfig};
