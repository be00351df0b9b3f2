//! Laboratory for the AdamA optimizer-accumulation method.
//!
//! The crate pairs a reference Adam path with the accumulate-and-release
//! AdamA path, instruments both with a byte-exact memory ledger, simulates
//! W-worker optimizer-state all-reduce, and carries the numeric
//! instruments (update-ratio tracking, regret harness, inequality
//! checkers) used to verify the method's convergence behavior at desk
//! scale.
//!
//! All numerics are generic over [`Scalar`]; `f64` is the oracle mode used
//! by equivalence tests, `f32` the fast mode.

pub mod analysis;
pub mod data;
pub mod dist;
pub mod error;
pub mod ledger;
pub mod memcalc;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit "oracle" array type.
pub type DenseArray64 = tensor::DenseArray<f64>;
/// 32-bit "fast" array type.
pub type DenseArray32 = tensor::DenseArray<f32>;
pub type ParamSet64 = nn::ParamSet<f64>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type OptimizerState64 = optim::OptimizerState<f64>;
pub type OptimizerState32 = optim::OptimizerState<f32>;
