//! Library side of the `pdsa` command-line tool.

pub mod commands;
pub mod config;
pub mod train;
