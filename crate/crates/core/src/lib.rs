//! Target-guided score-based denoising for extreme-low-SNR micrographs.
//!
//! The crate covers the whole pipeline: MRC I/O and tiling, noise
//! simulation, target-bank construction from a reference volume, a
//! preconditioned convolutional score network, denoising/target score
//! matching objectives with confidence-gated interpolation, the training
//! loop, iterative score-field inference, synthetic phantoms, and
//! downstream evaluation (particle matching, FSC).

pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod mrc_io;
pub mod noise_model;
pub mod objectives;
pub mod phantom;
pub mod score_model;
pub mod spectral;
pub mod target_bank;
pub mod trainer;

pub use error::{Error, Result};
