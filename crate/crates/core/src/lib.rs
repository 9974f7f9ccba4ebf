//! Layerwise tangent-kernel alignment toolkit.
//!
//! Infinite-width signal propagation theory, a deterministic from-scratch
//! feed-forward network with per-layer tangent features, kernel alignment
//! analytics, Hessian probes, greedy layerwise kernel training and the
//! experiment pipeline that ties them together.

pub mod alignment;
pub mod error;
pub mod hessian;
pub mod lfm;
pub mod linalg;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{Matrix, Spectrum, Which};
