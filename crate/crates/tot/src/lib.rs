//! Std front end for `tot-core`: dataset and checkpoint files, run manifests
//! and the `tot` command line.

pub mod cli;
pub mod error;
pub mod formats;
pub mod manifest;

pub use error::{CliError, CliResult};
