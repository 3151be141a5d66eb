//! Depth-guided zero-shot blind deblurring on a desk-scale latent diffusion model.

pub mod autoencoder;
pub mod blur;
pub mod checkpoint;
pub mod control;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod ops;
pub mod perceptual;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
