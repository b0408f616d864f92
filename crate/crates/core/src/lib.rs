//! Continuous pseudo-labeling for CTC models, with a pseudo-label cache whose
//! membership is driven by how fast pseudo-labels evolve, and alignment
//! sampling under a decaying temperature.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. Everything
//! here is a deterministic function of its inputs and explicitly passed
//! random streams; file formats and the command line live in the `cpl` crate.
//!
//! Module map:
//!
//! - [`metrics`]: Levenshtein statistics, token / word error rates.
//! - [`ctc`]: CTC loss and gradient, collapse, greedy and sampled decoding.
//! - [`model`]: a small frame encoder with analytic gradients, Adagrad, the
//!   learning-rate schedule and input masking.
//! - [`cache`]: the pseudo-label cache and `p_out` strategies.
//! - [`data`]: the synthetic CTC corpus and batchers.
//! - [`trainer`]: the three training phases, step records, divergence
//!   detection and analysis helpers.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cache;
pub mod ctc;
pub mod data;
mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Index of an output class. The blank occupies the last index of the output
/// layer, so transcripts only ever hold ids below `vocab_size - 1`.
pub type TokenId = u32;
