//! Datasets, models, training, checkpoints and reports.

pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod model;
pub mod report;
pub mod train;
