pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod palette;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod transformer;

mod nn;

pub use camseg_tensor::Float;
pub use error::{CamsegError, Result};
