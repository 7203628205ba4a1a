//! Library side of the `emf` command-line tool: run configuration, the
//! subcommands and benchmark timing.

pub mod bench;
pub mod commands;
pub mod config;
