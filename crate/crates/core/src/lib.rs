//! Non-Markovian denoising autoregressive models on dense CPU tensors.
//!
//! The crate trains and samples transformer denoisers that condition on the
//! whole noisy trajectory rather than a single Markov state, including the
//! token-autoregressive and flow-refined variants, multi-resolution joint
//! modeling, and mixed discrete/continuous sequences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod model;
pub mod noising;
pub mod parallel;
pub mod sampler;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{CoreError, Result};
pub use real::Real;
pub use tensor::Tensor;
