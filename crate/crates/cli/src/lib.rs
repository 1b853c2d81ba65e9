//! Command-line front end: configuration, run directories and artifacts.
//!
//! Every command resolves a [`config::RunConfig`], creates a fresh run
//! directory under `output_dir` and records a manifest with the config hash,
//! the checkpoint digest and the seed.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, Result};
