//! Driver for the ant-lab experiments: configuration, checksummed stages,
//! subcommands and SVG plots.

pub mod app;
pub mod commands;
pub mod config;
pub mod plot;
pub mod stages;
