//! Configuration, experiment orchestration and reporting for the `agp`
//! command-line tool.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod heatmap;
pub mod report;
pub mod suite;
pub mod verify;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "AGP_OUT";
