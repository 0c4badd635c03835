//! Command implementations behind the `csamoe` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
