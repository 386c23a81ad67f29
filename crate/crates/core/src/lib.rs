pub mod dsp;
pub mod error;

pub use error::{Error, Result};
pub mod transition;
pub mod diffusion;
pub mod denoiser;
pub mod synthgen;
pub mod trainer;
