//! Supervised contrastive learning for fine-grained band-pattern classification.
//!
//! The crate is organized around a small tape-based reverse-mode autodiff
//! engine ([`tensor`]), the contrastive + classification loss stack
//! ([`losses`]), an MLP encoder with checkpointing ([`model`]), a synthetic
//! band-pattern dataset generator with class-complete pairwise batch sampling
//! ([`data`]), an Adam training loop ([`optim`]), evaluation metrics and
//! embedding diagnostics ([`eval`]), and the command-line surface ([`cli`]).
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`]
//! (f32 for training, f64 for oracle-grade reference computation).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Result, SclError};
pub use scalar::Scalar;
pub use tensor::{ComputationRecord, NodeId, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Reference-precision tensor, used by oracle and gradient-check builds.
pub type Tensor64 = Tensor<f64>;
