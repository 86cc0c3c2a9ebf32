//! Pipeline crate: tensor container I/O, run configuration, stage
//! orchestration, metrics and report emission around `mpqdm-core`.

pub mod config;
pub mod container;
pub mod report;
pub mod runner;
pub mod size;
