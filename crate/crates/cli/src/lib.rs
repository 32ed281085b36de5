//! Command-line front end: raster files, manifests and subcommands.

pub mod commands;
pub mod io;
