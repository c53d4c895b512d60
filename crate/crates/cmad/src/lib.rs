//! Command-line front end and file formats for the `cmad-core` engine.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;

pub use error::{CliError, Result};
