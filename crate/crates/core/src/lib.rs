//! Convert dense decoder FFNs into fine-grained experts, profile which
//! experts each language activates, compare the resulting activation-frequency
//! matrices and prune experts by frequency.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the stored-weight precision.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod manifest;
pub mod model;
pub mod profile;
pub mod prune;
pub mod render;
pub mod scalar;
pub mod split;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Weights as stored in MLTB containers.
pub type Model = model::ModelBundle<f32>;
/// Double-precision model used for reference computations.
pub type Model64 = model::ModelBundle<f64>;
pub type Tap = model::ActivationTap<f32>;
pub type Grid = tensor::Matrix<f64>;
