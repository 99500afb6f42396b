//! Data ingestion, synthetic data, training, checkpoints and evaluation.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod synth;
pub mod text;
pub mod train;
