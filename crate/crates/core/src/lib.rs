//! Channel-wise image-guided multimodal diffusion.
//!
//! Several image modalities are packed into the channels of a single array and
//! one denoising diffusion model learns their joint distribution. Pinning a
//! subset of channels to a (noised) conditioning image during reverse sampling
//! turns the joint model into a conditional generator in any direction.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;

pub use error::{Error, Result};
