//! Command-line driver, file formats and plots for `sasa-core`.

pub mod config;
pub mod cli;
pub mod io;
pub mod plot;
