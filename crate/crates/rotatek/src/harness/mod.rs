//! Experiment harness: configuration, synthetic data, trace container I/O,
//! experiment orchestration, report emission, and the CLI.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod report;
pub mod synthetic;
pub mod trace;
