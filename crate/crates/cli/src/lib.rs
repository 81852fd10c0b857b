//! Experiment runner for `blo-core`: JSON configs with sweeps, parallel
//! fan-out of independent runs, CSV traces, JSON summaries, SVG charts and
//! pre-baked comparison studies.

pub mod app;
pub mod config;
pub mod runner;
pub mod studies;
pub mod svg;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use runner::{run_experiments, RunReport, RunnerOptions};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const RUN_FAILURE: i32 = 1;
    pub const CONFIG_ERROR: i32 = 2;
}
