//! Gradient-based class activation mapping on a minimal differentiable CNN
//! engine: Grad-CAM, its positive-gradient variant, and Grad-CAM++, plus the
//! relative-performance evaluation harness, alpha-distribution statistics,
//! and a finite-difference auditor for the Grad-CAM++ alpha derivation.
//!
//! The numeric core is generic over the scalar type ([`float::Real`],
//! implemented for `f32` and `f64`); inference normally runs in 32-bit
//! while the finite-difference oracles require 64-bit.

pub mod audit;
pub mod cam;
pub mod error;
pub mod eval;
pub mod float;
pub mod nn;
pub mod postproc;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Real;

/// Concrete tensor aliases for the two supported precisions.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;

/// Concrete model aliases.
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;

/// Concrete image aliases.
pub type Image32 = postproc::Image<f32>;
pub type Image64 = postproc::Image<f64>;
