//! Experiment runner: loss generators, the game loop, regret against the
//! best in-class competitor, bound reporting and CSV output.

mod config;
mod csv_io;
mod experiment;
mod generators;
pub mod verify;

pub use config::{ConfigBuilder, ExperimentConfig, GammaMode, Transform};
pub use csv_io::{emit_csv, read_csv, recompute_bounds, write_csv, CsvTable, RecomputedBounds, CSV_COLUMNS};
pub use experiment::{generate_table, run_experiment, run_on_table, RegretReport, RegretRow, RunSummary};
pub use generators::{GeneratorSpec, LossStream};
