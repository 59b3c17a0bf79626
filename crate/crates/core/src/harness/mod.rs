//! Configuration, results, plotting and command orchestration for the CLI.

pub mod commands;
pub mod config;
pub mod results;
pub mod svg;
