//! Experiment orchestration: configuration, sweeps, result files, plot data
//! and the oracle self-check.

pub mod config;
pub mod plot;
pub mod run;
pub mod verify;

pub use config::{Axis, ExperimentConfig, SweepConfig};
pub use plot::{emit_plot_data, PlotKind};
pub use run::{run_experiment, write_outputs, ExperimentResult, ResultRow, Summary};
