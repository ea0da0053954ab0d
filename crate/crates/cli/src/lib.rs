//! Subcommand implementations and the run configuration behind `bgcut`.

pub mod commands;
pub mod config;
