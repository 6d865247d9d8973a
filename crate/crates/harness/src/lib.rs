//! Experiment harness: sweep specifications, the cell runner, result
//! tables, embedding export and the gradient-check suite.

pub mod export;
pub mod gradsuite;
pub mod runner;
pub mod spec;
pub mod table;

pub use runner::{run_cell, run_experiment};
pub use spec::{Axis, ExperimentSpec, Precision, SweepSpec};
pub use table::{ResultTable, Scores};
