//! Subcommands and the HTTP annotation server behind the `stablelabel` binary.

pub mod commands;
pub mod server;
