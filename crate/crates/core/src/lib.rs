//! Learned two-way feedback channel coding over Gaussian two-way channels.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: the additive-noise two-way channel and power audits.
//! - [`knowledge`]: transmit/receive knowledge vectors and bit bookkeeping.
//! - [`nn`]: a small reverse-mode differentiation engine with the layers the
//!   coders need, an Adam optimizer and a checkpoint format.
//! - [`models`]: the LightCode-style (TWLC, ALC, LC) and block-attention
//!   (TWBAF) coders behind one two-way system abstraction.
//! - [`training`]: the joint sum-loss training loop.
//! - [`polar`]: the open-loop polar code baseline.
//! - [`flops`]: per-model complexity estimates.
//! - [`harness`]: Monte Carlo BLER evaluation and experiment orchestration.

pub mod channel;
pub mod error;
pub mod flops;
pub mod harness;
pub mod knowledge;
pub mod models;
pub mod nn;
pub mod polar;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
