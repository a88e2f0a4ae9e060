//! Dual-event conditioning probes for a toy trajectory diffusion model.
//!
//! A prompt is a pair of events; the sampler can switch from one condition to
//! the other partway through denoising ([`step_switch`]) or hand each event
//! to a different depth range of the network ([`block_split`]). Two backends
//! are provided: an exact closed-form [`AnalyticDenoiser`] and a small
//! trainable [`DenoiserModel`].

pub mod analytic;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod suite;
pub mod world;

pub use analytic::{AnalyticDenoiser, GaussianMixture};
pub use conditioning::{
    block_split, compose_concat, compose_single, qualitative_settings, split_index, step_switch,
    BlockAssignment, ConditionEmbedding, StepSchedule,
};
pub use diffusion::{
    sample, DenoiserBackend, NoiseSchedule, SamplerConfig, SamplerKind,
};
pub use error::{Error, Result};
pub use harness::{aggregate, emit_report, run_sweep, RunRecord, SweepConfig, SweepMode};
pub use metrics::{compute_metrics, MetricsRecord};
pub use neural::{DenoiserModel, ModelConfig, TrainConfig};
pub use suite::{Category, PromptRecord};
pub use world::{EventParams, Trajectory, View, WorldConfig};
