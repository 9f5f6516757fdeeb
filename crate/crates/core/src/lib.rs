//! LangevinFlow: a sequential variational autoencoder for binned spike
//! counts whose latent state follows discretized underdamped Langevin
//! dynamics in a learned coupled-oscillator potential.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays and the reverse-mode differentiation tape
//! - [`potential`]: grouped symmetric Toeplitz oscillator potential
//! - [`langevin`]: Hamiltonian and Ornstein–Uhlenbeck latent updates
//! - [`encoder`], [`decoder`]: GRU encoder and one-layer attention decoder
//! - [`model`]: the assembled model and its training objective
//! - [`data`]: synthetic Lorenz spiking data and the `LGVF` trial format
//! - [`train`]: Adam, KL warm-up, checkpoints (`LGVC`), the fit loop
//! - [`metrics`]: bits/spike, R², PSTH and ridge-decoding scores
//! - [`cli`]: the command implementations behind the `langevinflow` binary
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod langevin;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod potential;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
