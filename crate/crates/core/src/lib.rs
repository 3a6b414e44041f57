//! Wavelet-expansion physics-informed training for singularly perturbed
//! differential equations.
//!
//! A solution is written as a bias plus a linear combination of dilated and
//! translated wavelets. The derivatives needed by the residual come from
//! precomputed basis matrices, and a fully connected network produces the
//! expansion coefficients.

pub mod basis;
pub mod error;
pub mod matrices;
pub mod network;
pub mod oracles;
pub mod problems;
pub mod report;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
