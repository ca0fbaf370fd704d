//! Command-line front end: configuration files, commands, report tables and image grids.

pub mod commands;
pub mod config;
pub mod grid;
pub mod report;
