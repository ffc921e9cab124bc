//! Test-time correction for autoregressive few-step samplers, on an analytic
//! chunk-conditional Gaussian world.
//!
//! A rollout generates a sequence of chunks, each by a few-step
//! denoise/renoise sampler conditioned on earlier chunks. A biased denoiser
//! makes errors compound; reference-guided corrections, test-time scaling and
//! test-time optimization are compared with paired seeds.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod ttx;
pub mod world;

/// A chunk or frame vector.
pub type Latent = nalgebra::DVector<f64>;

pub use correction::{CorrectionConfig, CorrectionMode};
pub use error::{LabError, Result};
pub use harness::{parse_config, run_scenario, RunManifest, Scenario};
pub use metrics::{DriftReport, FrameEncoder, MetricSuite};
pub use sampler::{rollout, RolloutConfig, RolloutRecord, SamplerKind, Strategy};
pub use schedule::{make_rf_schedule, NoiseLevel, NoiseSchedule};
pub use ttx::{AdapterSpec, Optimizer, RewardKind, RewardSpec};
pub use world::{Denoiser, FrameDynamics, WorldSpec};
