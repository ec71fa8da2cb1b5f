//! Experiment plumbing for the `sparsemod` command: TOML configs, run
//! directories, sweeps over experiment grids, and text reports.

pub mod commands;
pub mod config;
pub mod report;
pub mod sweep;
