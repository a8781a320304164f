//! Command-line pipeline: configuration, shot-file handling, reports and
//! the subcommands that chain the simulation and inference stages.

pub mod commands;
pub mod config;
pub mod report;
