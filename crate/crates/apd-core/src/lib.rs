//! Core algorithms for a desk-scale decoding laboratory: tiny feedforward
//! language-model families, contrastive decoding and its hyper-sized-model
//! reading, per-context probability traces, decay-curve fits toward
//! asymptotic probabilities, the joint amateur/energy-network training loop,
//! sampling, and evaluation metrics.
//!
//! The crate is `no_std`-compatible (`alloc` required); all float math goes
//! through libm so results are identical with or without `std`. File formats
//! and the command-line front end live in the companion `apd-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cd;
pub mod corpus;
pub mod curve;
pub mod energy;
pub mod error;
pub mod eval;
pub mod family;
mod math;
pub mod model;
pub mod sampling;
pub mod source;
pub mod synthetic;
pub mod trace;
pub mod vocab;

pub use error::{Error, Result};
