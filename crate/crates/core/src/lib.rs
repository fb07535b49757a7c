//! Hierarchical Bayesian inference of plate deflection amplitudes from
//! strain measurements.
//!
//! The crate covers the full modelling chain: a synthetic strain oracle and
//! dataset generator, per-plate Gaussian-process surrogates, partial- and
//! no-pooling posterior densities with analytic gradients, a No-U-Turn
//! sampler, convergence diagnostics, and posterior predictive detection.

pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nuts;
pub mod plate_synth;
pub mod predictive;
pub mod special;
pub mod surrogate;
pub mod textfmt;

pub use diagnostics::{summarize, GateOutcome, ParamSummary, Summary, RHAT_THRESHOLD};
pub use distributions::{GammaParams, NormalParams};
pub use error::{Error, Result};
pub use model::{Hyperpriors, ModelKind, ModelSpec, ParamEntry, ParamLayout, Transform};
pub use nuts::{run_chains, Chains, LogDensity, SamplerConfig};
pub use plate_synth::{
    generate_dataset, strain_oracle, Dataset, DatasetConfig, GlobalTruth, GroundTruth, Observations, OracleConfig,
    PlateGeometry,
};
pub use predictive::{DetectionReport, PredictiveSamples, Source, ThresholdSet};
pub use surrogate::{FitOptions, GprModel, KernelConfig};
