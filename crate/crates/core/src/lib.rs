//! Attribution engine: Integrated Gradients, Grad-CAM and RSI-Grad-CAM over a
//! small trainable CNN, plus baseline perturbation toward a target output
//! distribution.

pub mod attribution;
pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
