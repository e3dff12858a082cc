//! Multi-encoder video representation pipeline at desk scale.
//!
//! The crate wires a set of deterministic mock visual encoders through
//! spatio-temporal alignment, pre-fusion projection, and a cross-attentive
//! mixer, and surrounds that core with a FLOPs/parameter cost model, a
//! step-time scheduler simulation, and a toy causal-LM training harness.

pub mod alignment;
pub mod config;
pub mod costmodel;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod numerics;
pub mod param;
pub mod rng;
pub mod scheduler;
pub mod threads;
pub mod toytrain;

pub use error::{MervError, Result};
pub use numerics::Tensor;
