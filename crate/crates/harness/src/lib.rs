//! Benchmark harness for the early-exit decoding policies: corpus handling,
//! experiment configuration, threshold sweeps, adaptive-threshold runs and
//! the analysis reports.

pub mod adaptive;
pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod replay;
pub mod runner;
pub mod sweep;

pub use error::{HarnessError, Result};
