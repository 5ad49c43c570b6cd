//! Experiment harness: synthetic data, run configuration, from-scratch
//! evaluation, and the speed and margin reports.

pub mod experiment;
pub mod eval;
pub mod report;
pub mod synthetic;
