//! Library behind the `cubediff` binary: configuration, output handling,
//! the experiment subcommands and the acceptance suite.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
