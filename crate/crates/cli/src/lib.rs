//! File formats, configuration and commands around `mfcl-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod golden;
pub mod manifest;
pub mod run;
pub mod wav;

pub use error::{CliError, Result};
