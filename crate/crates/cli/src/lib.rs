//! Command-line entry points and the HTTP session service.

pub mod commands;
pub mod error;
pub mod service;

pub use error::CliError;
