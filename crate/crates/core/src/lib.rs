//! Compression toolkit for a toy unified multimodal model.
//!
//! The crate covers calibration-driven structured pruning (layers, MLP
//! neurons, attention heads), diagnostic analyses of neuron importance and
//! activation dynamics, and conversion of dense MLPs into shared/routed
//! Mixture-of-Experts layers followed by staged adaptation training.

pub mod analysis;
pub mod data;
pub mod error;
pub mod importance;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod store;
pub mod surgery;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use model::{Component, Granularity, ModelConfig, UnifiedToyModel};
pub use numerics::{Real, Tape, Tensor, Var};
