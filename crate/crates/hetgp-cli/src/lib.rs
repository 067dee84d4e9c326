//! Benchmark harness: experiment configuration, grid execution over
//! `(case, model, seed)`, per-run metric records and summary aggregation.

pub mod config;
pub mod records;
pub mod runner;
pub mod summary;

pub use config::{CaseName, ExperimentConfig};
pub use records::RunRecord;
pub use runner::{run_grid, run_single};
pub use summary::{summarize, SummaryRow};
