//! The `obsnet` command-line tool: dataset generation, training, scoring,
//! evaluation, rendering and the end-to-end pipeline.

pub mod args;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod render;

pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, PipelineOutcome};
