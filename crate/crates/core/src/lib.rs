//! Hybrid state-space / attention backbones for audio deepfake detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over 2-D arrays, with fused
//!   kernels for the recurrent scans.
//! - [`mixers`]: the four SSM token mixers (Mamba, Mamba2, Hydra, Gated
//!   DeltaNet) and non-causal multi-head attention, plus dense matrix
//!   oracles for every scan.
//! - [`backbone`]: the four MamBo layer topologies, embedding path, gated
//!   attention pooling, the binary head and the checkpoint format.
//! - [`training`]: focal loss, AdamW, warmup/cosine schedule and the
//!   training loop with early stopping and top-k checkpoint retention.
//! - [`metrics`]: DET sweep, EER, min t-DCF and Best/Avg aggregation.
//! - [`data`]: feature files, protocols, fixed-length shaping and the
//!   synthetic dataset generator.
//! - [`config`] and [`cli`]: experiment configuration and the `mambo` tool.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod metrics;
pub mod mixers;
pub mod params;
mod real;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
