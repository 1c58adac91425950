//! Command-line front end: configuration, subcommands and their reports.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod selfcheck;

pub use config::{ClassSet, Overrides, RunConfig};
pub use error::CliError;
