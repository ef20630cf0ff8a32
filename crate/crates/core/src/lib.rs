//! Set refiner networks at desk scale.
//!
//! A small reverse-mode autodiff engine with double-backward support, the
//! layers needed for convolutional set autoencoders, the synthetic circles
//! dataset, baseline and refined set pipelines, training and evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
