//! Adaptive-depth recurrent transformer (prelude / shared recurrent core / coda)
//! with per-token exit deciders, trained from scratch on a CPU, together with
//! the synthetic task suite, an incremental prefix PCFG parser, and the
//! statistics toolkit used to test whether learned compute allocation tracks
//! task complexity.
//!
//! The numeric core is generic over the scalar type: `f32` for training speed,
//! `f64` for the finite-difference verification suites.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod objective;
pub mod pcfg;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision gradient tape.
pub type Tape32 = tensor::GradientTape<f32>;
/// Verification-precision gradient tape.
pub type Tape64 = tensor::GradientTape<f64>;
