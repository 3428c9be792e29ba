//! Experiment plumbing: data, configuration, training runs, grid search,
//! mechanism replications, checkpoints and plots.

pub mod data;
pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod replicate;
pub mod svg;
pub mod train;
