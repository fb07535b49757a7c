//! Pipeline orchestration for the `hbshm` command-line tool: configuration,
//! stage execution, artifact layout and the run report.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{derive_seed, PipelineConfig};
pub use pipeline::{Layout, ModelChoice, Pipeline, RunManifest};
