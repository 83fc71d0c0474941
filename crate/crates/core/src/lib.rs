//! Parameter-space knowledge transfer between heterogeneous models.
//!
//! Weights of a source model are re-encoded as low-rank factor pairs, an
//! attention-based parameter adapter fuses them with the target model's
//! factors to generate replacement factors, and a training engine interleaves
//! these transfer events with ordinary gradient-descent self-learning.
//!
//! The crate is organized along those lines:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode autodiff,
//!   sufficient for every adapter and model computation here.
//! - [`lowrank`]: low-rank factor pairs `B·A` and truncated-SVD re-encoding
//!   of dense weights.
//! - [`adapters`]: the attention fuser over row/column flattenings of the
//!   factors, its ablation variants, the MLP baseline, and stacked
//!   knowledge-transfer layers.
//! - [`engine`]: the interleaved transfer/self-learning schedule, the
//!   delta-based adapter update rule, and adapter removal for inference.
//! - [`zoo`]: small reference models with declared transfer slots, a seeded
//!   synthetic data generator, and a CIFAR binary loader.
//! - [`harness`]: config-driven experiment runner, presets, sweeps, and
//!   CSV reporting.

pub mod adapters;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod harness;
pub mod lowrank;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
