pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
