//! Adaptive trajectory policy optimization for small masked-diffusion
//! language models.
//!
//! The pipeline: instrumented denoising rollouts ([`sampler`]) record per-step
//! entropy and inverse confidence margin; [`metrics`] averages them into batch
//! difficulty curves; [`selection`] turns the curves into a shared segment
//! plan; [`stepmerge`] scores each segment's committed tokens; [`rl`] turns
//! the scores into a clipped, KL-regularized group-relative policy gradient.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod rng;
pub mod sampler;
pub mod selection;
pub mod stepmerge;
pub mod tasks;
pub mod trace_io;

pub use domain::{
    validate_plan, validate_prob, DifficultyCurves, ProbVector, RolloutTrace, SegmentPlan,
    SequenceState, StepRecord, TokenId, TransferMask, Vocab,
};
pub use error::{Error, Result};
