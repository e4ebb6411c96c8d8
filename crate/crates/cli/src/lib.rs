//! Command-line front end: run configuration and subcommands.

pub mod commands;
pub mod config;
