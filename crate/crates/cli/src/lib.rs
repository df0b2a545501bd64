//! Experiment driver for the `acnnl` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod metrics;
