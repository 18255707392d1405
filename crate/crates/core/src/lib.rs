//! Diffusion-based extrapolation of future frames from irregularly sampled
//! longitudinal image sequences, trained and evaluated end to end on a
//! synthetic fundus-progression dataset with analytically known geometry.
//!
//! The pipeline: sequences are aligned onto fixed year slots with a
//! time-aligned mask (present / missing / hidden), encoded losslessly into
//! latent space, noised by a DDPM forward process, and denoised by a small
//! frame-wise U-Net with temporal attention over known frames and per-frame
//! label conditioning.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, ValueId};
