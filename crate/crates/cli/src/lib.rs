//! Subcommand implementations and the HTTP chat server behind the `ardm`
//! binary.

pub mod commands;
pub mod server;
