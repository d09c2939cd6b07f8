//! Experiment runner: per-seed pre-training, zero- and k-shot evaluation on
//! every downstream task, result tables, charts and the verification suites.

mod config;
mod report;
mod results;
mod run;
pub mod verify;

pub use config::ExperimentConfig;
pub use report::{render_report, render_svg, summary_csv, ReportFiles};
pub use results::{AggregateRow, ResultRow, ResultsTable, TrendRow};
pub use run::{
    aggregates_match, downstream_split, run_experiment, BaselineSummary, CellFailure, RunOutcome,
    SeedPlan, MANIFEST_VERSION,
};
