//! Experiment runner for `zo-core`: TOML experiment files, sweeps over query
//! count, noise level, sampler and combine mode, and result directories of
//! CSV metrics, JSON summaries and seed logs.

use std::fmt;

pub mod compare;
pub mod config;
pub mod run;

pub use compare::{compare, ComparisonTable};
pub use config::ExperimentConfig;
pub use run::{run_experiment, ExperimentReport, RunSummary};

/// A mistake in how the harness was invoked, as opposed to a failed run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
