//! Command-line front end for `diffnet-core`: TOML configuration, CSV signal
//! files, JSON reports and Monte-Carlo experiments.

pub mod config;
pub mod csvio;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{HarnessError, Result};
