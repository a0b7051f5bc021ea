//! Desk-scale laboratory for distilling a small transformer teacher into
//! state-space students and measuring best-of-N inference scaling.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`tensor`]: f64 tensors with reverse-mode autodiff and the checkpoint format
//! - [`models`]: teacher transformer, SSM student layers, hybrid stacks, decoding
//! - [`distill`]: the three-stage distillation pipeline, hybrid conversion, SFT
//! - [`tasks`]: synthetic arithmetic chain-of-thought benchmark and tokenizer
//! - [`sampler`]: batched stochastic generation with per-sample reproducible RNG
//! - [`eval`]: coverage/accuracy estimators, reward oracle, Pareto analysis
//! - [`bench`]: decode throughput and memory benchmark
//! - [`pipeline`]: run directory management and the command implementations
//!   behind the CLI

pub mod bench;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod sampler;
pub mod tasks;
pub mod tensor;

pub use error::{DlabError, Result};
pub use tensor::Tensor;
