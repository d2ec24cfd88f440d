//! Configuration and command plumbing behind the `iemf` binary.

pub mod commands;
pub mod config;

pub use config::{AnalysisConfig, ExperimentConfig};
