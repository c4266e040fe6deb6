//! Pipeline driver for the latent safety-filter toolkit.

pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::{exit_code, Outcome, Pipeline, Stage, Suite};
