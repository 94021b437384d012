//! Contrastive representation learning for point clouds on a small
//! reverse-mode autodiff engine.

pub mod error;
mod kernels;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub mod cloud;
pub mod dataset;
pub mod synthetic;
pub mod transforms;

pub mod checkpoint;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
