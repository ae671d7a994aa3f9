//! Coupled WarpRNN implicit neural video representation.
//!
//! A video is stored as the weights of a recurrent network (two coupled
//! warping ConvGRUs feeding a sub-pixel convolutional decoder) plus a small
//! learnable residual grid sampled along time. The model is overfit to one
//! clip, quantized, and decoded frame by frame.

pub mod compression;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
