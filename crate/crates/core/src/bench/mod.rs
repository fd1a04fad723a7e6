//! Synthetic data, training, evaluation and reporting.

pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod train;
pub mod viz;
