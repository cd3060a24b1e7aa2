//! Flatness-oriented quantization-aware training at desk scale.
//!
//! Learned-scale fake quantizers with straight-through gradients, a
//! two-pass dual-gradient optimizer, a gradient-disorder based freezing
//! controller for scale factors, and a leave-one-domain-out harness to
//! measure what all of it does to out-of-distribution accuracy.

pub mod batch;
pub mod config;
pub mod data;
pub mod error;
pub mod freeze;
pub mod graph;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod params;
pub mod probe;
pub mod quantizer;
pub mod record;
pub mod sagm;
pub mod tensor;

pub use error::{Error, Result};
