//! Continuous sign language recognition on the CPU, end to end.
//!
//! This crate implements a small but complete recognition pipeline:
//! a windowed-attention video backbone with optional temporal adapters,
//! a dilated temporal convolution stack with lift pooling, a recurrent
//! sequence head, an alignment-free sequence loss, and a deterministic
//! synthetic data generator — all on a hand-rolled tensor engine with
//! reverse-mode automatic differentiation.
//!
//! Everything is reproducible: one documented RNG, fixed reduction
//! orders, and bit-exact checkpoints. The `cslr` binary exposes data
//! generation, training, evaluation, decoding, and gradient verification.

pub mod alignment;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod tape;
pub mod temporal;
pub mod train;
pub mod verify;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point used by the `cslr` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run(std::env::args_os())
}
