// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, experiment configs, sweeps and reports around
//! [`actpatch_core`].

#![forbid(unsafe_code)]

pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod runner;

pub use config::{Aggregation, ExperimentConfig, ModelPaths, SweepKind, TaskConfig};
pub use error::{RunError, RunResult};
pub use runner::{run, run_config, RunManifest, RunOutcome};
