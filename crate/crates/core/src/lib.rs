//! Hierarchical shifted-window vision transformer with efficient channel
//! attention after every stage, plus the tensor engine, data pipeline,
//! training loop and evaluation metrics around it.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Training
//! and checkpoints use `f32`; `f64` exists for finite-difference checks.

pub mod checkpoint;
pub mod data;
pub mod eca;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, SwinEcat};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = SwinEcat<f32>;
pub type Model64 = SwinEcat<f64>;
