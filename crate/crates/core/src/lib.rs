//! Three-branch convolutional network (plain, residual and dense branches)
//! for classifying fluorescence microscopy images by subcellular location,
//! written from scratch with hand-derived backward passes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
mod fsutil;
pub mod gradcam;
pub mod graph;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = graph::Network<f32>;
pub type Network64 = graph::Network<f64>;
pub type Parameters32 = graph::Parameters<f32>;
pub type Parameters64 = graph::Parameters<f64>;
pub type Sample32 = data::Sample<f32>;
pub type Sample64 = data::Sample<f64>;
