//! Core of the radar + oximetry sleep apnea pipeline.

pub mod dsp;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod oximetry;
pub mod session;
pub mod sim;

pub use error::{Error, Result};
