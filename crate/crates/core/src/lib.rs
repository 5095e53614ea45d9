//! Damped-EMA attention network for temporal language grounding, trained
//! with a matching loss plus an energy-based objective whose negatives are
//! drawn by Langevin dynamics.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode tape, finite-difference checks
//! - [`dema`]: damped EMA recurrence and the gated attention block
//! - [`model`]: audio fusion, encoder/decoder stacks, heads, spans
//! - [`ebm`]: energies, Langevin sampler, contrastive NLL
//! - [`training`]: targets, losses, Adam, the fit loop
//! - [`metrics`]: IoU, Rank k@μ, mAP@μ, Hit@1
//! - [`data`]: synthetic generator, JSONL manifest and predictions
//! - [`config`]: run configuration

pub mod config;
pub mod data;
pub mod dema;
pub mod ebm;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{ConfigError, DataError, NumericsError, TrainError};
