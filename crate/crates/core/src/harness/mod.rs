//! Experiment orchestration: config, the train, unlearn, profile, attack
//! and report stages, and the rendered tables and plot.

mod config;
mod render;
mod report;
mod stages;

pub use config::{BlobDataset, DatasetSpec, ExperimentConfig, IdxDataset, OriginalSpec};
pub use render::{emit_tables, gap_plot_svg, Table};
pub use report::{
    AccuracyQuad, CorrelationRecord, Evaluation, ExperimentReport, ModelSummary, RunRecord, SeedComparison,
};
pub use stages::{load_report, run_experiment, Experiment, GAP_PLOT_FILE, ORIGINAL, REPORT_FILE};

#[cfg(test)]
mod tests;
