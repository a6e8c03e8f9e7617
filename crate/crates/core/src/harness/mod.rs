//! Experiment plumbing behind the command-line tool: config files, result
//! CSVs, reports and preset calibration.

pub mod config;
pub mod fit;
pub mod report;
pub mod results;
pub mod run;

pub use config::{ConfigError, ExperimentConfig};
pub use fit::{fit, read_anchors, Anchor, DropSetup, FitError, FitReport};
pub use report::render;
pub use results::{read_rows, to_csv_string, write_rows, ResultRow, ResultsError, SCHEMA_VERSION};
pub use run::{parse_values, run_experiment, run_sweep, RunError, SweepAxis};
