//! File formats, configuration and command implementations for the
//! `ltsm-diff` forecasting tool. Model code lives in `ltsm-diff-core`.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod parallel;
pub mod report;

pub use error::{AppError, Result};
