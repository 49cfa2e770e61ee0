//! Random grids, scoring, and experiment sweeps.

pub mod experiment;
pub mod generate;
pub mod metrics;

pub use experiment::{run_experiment, CellSummary, ExperimentConfig, ExperimentResult, MomentMode, RunOptions, TrialRow};
pub use generate::{random_radial_grid, GridSpec};
pub use metrics::{edge_difference, evaluate, impedance_error, match_hidden_and_diff, EvalReport, Matching};
