//! Numeric core for joint-embedding predictive pre-training with
//! discriminative, neighbor-aggregated masked targets.
//!
//! Everything in this crate is a pure function of its inputs and an explicit
//! random stream. It builds without `std` (only `alloc` is required); file
//! formats, the training driver and the command line live in the `dmtj` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod aggregation;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod params;
pub mod probe;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod visualize;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Deterministic random stream used across the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
