//! Allocation-only core of the LTSM-Diff forecaster.
//!
//! A LoRA-adapted transformer encoder turns a lookback window into a
//! temporal representation; a dual-timestep transformer denoiser learns the
//! joint distribution of (representation, future values) and, with the
//! representation held clean, samples forecasts with DDPM or DDIM.
//!
//! Everything here is pure computation over `alloc` collections. File
//! formats, configuration files, and the command line live in the
//! `ltsm-diff` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod lora;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod uvit;

pub use error::{Error, Result};
pub use model::{LtsmDiff, ModelConfig};
pub use tensor::Matrix;
