//! Learned low-bit quantization for convolutional networks: fake-quant
//! training, BN-free transforms, integer compilation and noise simulation.

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod integer;
pub mod layers;
pub mod noise;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
