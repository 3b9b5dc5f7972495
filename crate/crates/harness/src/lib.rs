//! Experiment harness for KAN node-aggregation studies: the full aggregator
//! sweep, the kan / kan-layernorm / kan-avg comparison, and spline-range
//! adherence.
//!
//! Every run gets its own seed derived from the global seed, the dataset, the
//! combination and the run index, so runs execute in parallel yet reproduce
//! exactly. Reports are built only from the per-run records.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod runner;
pub mod seeds;

pub use config::{ExperimentConfig, Mode, SyntheticSpec, TrainOverrides, Variant};
pub use error::{HarnessError, Result};
pub use experiments::{
    run_adherence, run_comparison, run_sweep, AdherenceSummary, ComparisonReport, Outcome, SweepReport,
};
pub use runner::{RunOutcome, RunRecord};
