//! Pipeline orchestration behind the `rosa` command line tool.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod plot;

pub use error::{CliError, Result};
