//! Post-hoc error correction for chunk-based autoregressive forecasting.
//!
//! A fixed backbone forecaster maps a `W`-step history to an `L`-step
//! forecast; long horizons are reached by feeding predictions back as
//! inputs, which accumulates error across chunks. This crate wraps any
//! such forecaster, trains a small corrector network on held-out
//! validation data, calibrates a correction strength `beta`, and
//! evaluates corrected against uncorrected rollouts.

pub mod backbone;
pub mod calibration;
pub mod codec;
pub mod config;
pub mod corrector;
pub mod data;
pub mod decomp;
pub mod error;
pub mod evaluation;
pub mod micronet;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
