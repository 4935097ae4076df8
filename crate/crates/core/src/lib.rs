//! A desk-scale single-stage detector with area attention, built from first principles.
//!
//! The crate is organised bottom-up:
//! - [`tensor`]: dense tensors, reverse-mode autodiff, gradient checking
//! - [`nn`]: parameters, forward context and the conv/BN/activation layer
//! - [`attention`]: full and area attention, position perceiver, tiled kernel, cost model
//! - [`blocks`]: bottleneck, C3k2, A2C2F, R-ELAN and the ELAN/CSP reference blocks
//! - [`model`]: the backbone/head graph, detection decoding, NMS, weight files
//! - [`profiler`]: FLOP accounting, latency benchmarks, report emission
//! - [`pipeline`]: image ingestion, letterboxing, synthetic data and the toy trainer
//! - [`checks`]: the finite-difference gradient suite

pub mod attention;
pub mod blocks;
pub mod checks;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod profiler;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
