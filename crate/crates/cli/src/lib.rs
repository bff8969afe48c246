//! Library side of the `nvflow` command: configuration loading and the
//! price / converge / bench commands.

pub mod commands;
pub mod config;
