//! Experiment runner: configuration, seeded runs, sweeps, aggregator
//! comparisons and curve export.
//!
//! A run directory holds `config.toml` (the resolved single-seed config),
//! `metrics.csv` (one row per round, columns in [`METRIC_COLUMNS`]) and
//! `summary.json` (versioned by `schema_version`). Files are written via a
//! `.partial` sibling and renamed into place.

mod config;
mod export;
mod runner;

pub use config::{
    AugmentSettings, DatasetSpec, ExperimentConfig, FederationSpec, GridSpec, MetricsSpec, ModelSpec, PartitionSpec,
    RunSpec, SplitSpec,
};
pub use export::{curves_csv, export_curves, CURVES_FILE};
pub use runner::{
    compare_aggregators, grid_cells, mean_std, metrics_csv, prepare_data, run_dir, run_experiment, run_grid, simulate,
    write_run, AggregatorStats, CellSummary, ComparisonRow, ComparisonTable, GridCell, PartitionSummary, PreparedData,
    RunOutcome, RunSummary, METRIC_COLUMNS, SCHEMA_VERSION,
};
