pub mod autograd;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod harness;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
