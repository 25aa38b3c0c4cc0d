//! A small, dependency-light CNN engine for lightweight image enhancement.
//!
//! Networks are trained in a multi-branch form (parallel convolutions with
//! batch norm, merged by a 1×1 convolution) and collapsed afterwards into
//! plain single-path convolutions for inference.

pub mod archive;
pub mod bench;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod reparam;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Bias, Kernel, Tensor4};
