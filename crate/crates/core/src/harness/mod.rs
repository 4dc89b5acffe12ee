//! Experiment orchestration: run configuration, report and sample CSVs,
//! SVG panels, the three experiment drivers, and the command-line front end.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;
pub mod svg;

pub use config::RunConfig;
pub use experiments::{run_ablation_grid, run_steps_sweep, run_toy_comparison, Lab, TrainedModel};
pub use report::{Cell, ReportWriter, RunReport};
pub use svg::emit_scatter_svg;
