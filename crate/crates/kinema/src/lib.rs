//! Desk-scale latent video diffusion.
//!
//! Videos are compressed through a 3D convolutional autoencoder into a
//! normalized latent space; a single masked-conditioning diffusion model
//! handles unconditional generation, autoregressive prediction, and frame
//! interpolation; long videos come from hierarchical sparse-then-interpolate
//! sampling with conditional latent perturbation. Evaluation uses
//! encoder-feature Fréchet/kernel distances over non-overlapped clips.
//!
//! Crate layout:
//! - [`data`] — synthetic moving-shapes corpus and frame-folder ingestion
//! - [`autoencoder`] — 3D autoencoder, discriminator, latent normalization
//! - [`diffusion`] — noise schedules, forward/backward process, samplers
//! - [`denoiser`] — the ε-prediction UNet (factorized space/time attention)
//! - [`conditioning`] — binary frame masks, ground-truth substitution,
//!   conditional latent perturbation
//! - [`longvideo`] — autoregressive extension, hierarchical generation,
//!   unconditional guidance
//! - [`eval`] — PSNR, Fréchet/kernel feature distances, degradation curves
//! - [`config`] / [`checkpoint`] / [`pipeline`] — run configuration,
//!   checkpoint I/O, and the training/sampling drivers behind the CLI

pub mod autoencoder;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod longvideo;
pub mod pipeline;
pub mod rawclip;
pub mod rng;

pub use error::{Error, Result};

/// Dense n-dimensional array of f64, the numeric currency of the crate.
pub type Arr = ndarray::ArrayD<f64>;
