//! A weight-shared "super-network" whose quantizable layers switch among
//! ultra-low bit-widths at inference time, plus a small Q-learning agent that
//! picks a per-layer bit assignment for each input under a BitOps budget.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`]: dense tensors, layer primitives, optimizers, gradient checks
//! - [`quant`]: learned-step-size fake quantization kernels
//! - [`supernet`]: the switchable network and config enumeration/sampling
//! - [`checkpoint`]: persistence in master and aligned storage modes
//! - [`trainer`]: the four-sub-stage distillation training loop
//! - [`cost`]: BitOps accounting and normalization
//! - [`policy`]: state encoding, episode rollouts, double-Q learning
//! - [`data`] / [`config`] / [`report`]: dataset ingestion, run configs, CSVs

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod policy;
pub mod quant;
pub mod report;
pub mod rng;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
