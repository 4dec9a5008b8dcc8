//! Cross-modal feature fusion built around a low-rank matching attention
//! mechanism, together with the classic fusion baselines (add, concatenate,
//! tensor fusion, low-rank multimodal fusion) and a small training pipeline
//! for utterance-level sequence classification.
//!
//! Everything is written against a minimal dense-matrix kernel with paired
//! forward/backward rules; there is no tape autograd. The crate is `no_std`
//! (alloc only) so the numeric core stays free of platform dependencies;
//! file formats, timing and the CLI live in the companion `lmam-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;

pub mod attention;
pub mod fusion;
pub mod gradcheck;
pub mod lowrank;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use param::Param;
pub use rng::Rng;
