//! Dialect identification from acoustic-model features.
//!
//! The crate covers the whole stack: a small reverse-mode autodiff engine,
//! a log-mel frontend, a ResNet14 trunk with bidirectional recurrent layers,
//! CTC training of an acoustic model, a recurrent dialect classifier trained
//! on the acoustic model's frozen intermediate features, a synthetic corpus
//! generator and the evaluation harness.

pub mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod eval;
pub mod frontend;
pub mod models;
pub mod nn;
pub mod pipeline;
mod error;

pub use error::{Error, Result};

/// Scalar type used by every tensor. 64-bit unless the `f32` feature is on.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;
