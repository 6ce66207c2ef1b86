//! Dithered, stochastic and nested dithered gradient quantization, with a
//! synchronous parameter-server simulator for distributed SGD.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod dither;
pub mod error;
pub mod nested;
pub mod quant;
pub mod scalar;
pub mod simnet;
pub mod stats;
pub mod training;
pub mod verify;

pub use dither::{advance_round, dither_at, mix64, DitherCoordinates};
pub use error::{Error, Result};
pub use nested::{NestedConfig, NestedMessage, SideInfoModel};
pub use quant::{Gradient, OneBitState, QuantizedMessage, QuantizerKind, UniformQuantizerCfg};
pub use scalar::Scalar;

pub type GradientVector = Gradient<f64>;
pub type GradientVectorF32 = Gradient<f32>;
