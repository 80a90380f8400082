//! Command-line surface of the detection pipeline: synthetic data, training,
//! detection, evaluation and inspection, driven by one TOML configuration.

pub mod cli;
pub mod commands;
pub mod config;
pub mod outputs;

pub use cli::{run, Cli};
pub use config::RunConfig;
