//! Simulation of task-based acquisition with learned sampling and
//! quantization.

pub mod adc;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod harness;
pub mod meta;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
