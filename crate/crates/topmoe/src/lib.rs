//! File formats, experiment harness and command-line front end for
//! sparse top-1 mixture-of-experts controllers.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, Result};
