//! Learned invisible image watermarking: a U-Net encoder hides a bit string
//! in an image, a differentiable perturbation pipeline simulates print/scan
//! style damage, and a spatial-transformer decoder reads the bits back.

pub mod cli;
pub mod data_io;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod plot;
pub mod robustness;
pub mod trainer;

pub use data_io::{ImageBuffer, Message};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
