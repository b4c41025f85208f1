//! Training engine for continuous pruning with selective weight decay.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the storage type for everyday use.

pub mod autograd;
pub mod baselines;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod prune;
pub mod scalar;
pub mod swd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelGraph32 = nn::ModelGraph<f32>;
pub type ModelGraph64 = nn::ModelGraph<f64>;
