//! Datasets, configuration, persistence, metrics and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;

pub use cli::run_cli;
