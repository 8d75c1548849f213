//! Domain-consistent quality enhancement for compressed images.
//!
//! A small f64 reverse-mode autodiff engine backs two convolutional
//! enhancer families trained with enhancement, identity, idempotency and
//! bounded compactness objectives. Around it sit a block-DCT codec
//! simulator, a multi-enhancement evaluation harness with the Degradation
//! Index, and a 2-D toy lab for studying idempotent training.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod codec;
pub mod config;
pub mod desk;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
