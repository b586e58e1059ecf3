//! Binarized neural network kernels, estimators and benchmark accounting.

pub mod bench;
pub mod binarize;
pub mod bittensor;
pub mod complexity;
pub mod corrupt;
pub mod deploy;
pub mod error;
pub mod gradients;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod probe;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FloatTensor, Tensor};
