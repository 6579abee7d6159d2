//! A desk-scale diffusion lab for studying border-truncated object generation.
//!
//! The crate trains a tiny conditional attention denoiser on synthetic shape
//! scenes, reproduces the effect of RandomCrop augmentation on object
//! truncation, and implements a training-free remedy: during the early
//! denoising steps the latent is nudged down the gradient of a dispelling
//! loss that penalizes attention activation in a boundary band of the
//! attention grid relative to a random internal window.
//!
//! Module map:
//! - [`gridmath`] — dense f32 tensors with tape-based reverse-mode autodiff
//! - [`scenes`] — synthetic shape dataset and the RandomCrop pipeline
//! - [`denoiser`] — toy attention denoiser, noise schedule, training loop
//! - [`sampler`] — DDPM/DDIM reverse process with a per-step guidance hook
//! - [`dispel`] — the dispelling constraint and latent guidance step
//! - [`metrics`] — automatic completeness evaluation and trend reports
//! - [`cli`] — subcommands, config files, experiment orchestration

pub mod cli;
pub mod denoiser;
pub mod dispel;
pub mod error;
pub mod gridmath;
pub mod img;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod scenes;

pub use error::Error;

/// Side length of the attention grid. Attention maps are extracted at this
/// resolution throughout.
pub const GRID: usize = 16;

/// Number of cells in the attention grid.
pub const GRID_CELLS: usize = GRID * GRID;

pub type Result<T> = std::result::Result<T, Error>;
