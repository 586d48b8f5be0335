//! Command-line front end: experiment config, subcommands and report files.

pub mod commands;
pub mod config;
pub mod report;
