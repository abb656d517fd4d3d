//! Group-relative advantages, the clipped KL-regularized token objective,
//! and the per-trajectory loss over a segment plan.

mod optim;
mod trainer;

pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use trainer::{eval_traces, evaluate, run_training, EvalStats, IterationOutput, RunOptions, RunSummary, Trainer};

use crate::domain::{RolloutTrace, SegmentPlan};
use crate::error::Result;
use crate::model::{self, ParamSnapshot, StateObjective, TokenLoss, TokenTerm};
use crate::stepmerge;

/// `A_j = (R_j - mean R) / (std_pop R + eps)`; a single rollout gets 0.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Vec<f64> {
    if rewards.len() < 2 {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let base = rewards[0];
    let shift = rewards.iter().map(|r| r - base).sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| (r - base) - shift).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    centered.iter().map(|c| c / (std + eps_adv)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
}

/// Clipped surrogate minus `beta` times the k3 KL estimate; to be maximized.
pub fn token_objective(
    logp_new: f64,
    logp_old: f64,
    logp_ref: f64,
    advantage: f64,
    clip_eps: f64,
    beta: f64,
) -> f64 {
    PpoTerm {
        logp_old,
        logp_ref,
        advantage,
        clip_eps,
        kl_beta: beta,
    }
    .objective(logp_new)
    .0
}

/// Per-token loss `-objective(logp_new)` with the other inputs frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoTerm {
    pub logp_old: f64,
    pub logp_ref: f64,
    pub advantage: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
}

impl PpoTerm {
    /// Objective value and its derivative in `logp_new`.
    fn objective(&self, logp_new: f64) -> (f64, f64) {
        let a = self.advantage;
        let ratio = (logp_new - self.logp_old).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - self.clip_eps, 1.0 + self.clip_eps) * a;
        let (surrogate, d_surrogate) = if unclipped <= clipped {
            (unclipped, unclipped)
        } else {
            (clipped, 0.0)
        };
        let log_ref_ratio = self.logp_ref - logp_new;
        let ref_ratio = log_ref_ratio.exp();
        let kl = ref_ratio - log_ref_ratio - 1.0;
        let d_kl = 1.0 - ref_ratio;
        (surrogate - self.kl_beta * kl, d_surrogate - self.kl_beta * d_kl)
    }

    pub fn kl(&self, logp_new: f64) -> f64 {
        let x = self.logp_ref - logp_new;
        x.exp() - x - 1.0
    }
}

impl TokenLoss for PpoTerm {
    fn eval(&self, logp: f64) -> (f64, f64) {
        let (obj, slope) = self.objective(logp);
        (-obj, -slope)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryLoss {
    /// `-(mean token objective)` over every scored position.
    pub loss: f64,
    pub mean_kl: f64,
    pub scored: usize,
    /// One entry per segment; weights are `1 / scored`.
    pub objectives: Vec<StateObjective<PpoTerm>>,
}

pub struct Snapshots<'a> {
    pub current: &'a ParamSnapshot,
    pub old: &'a ParamSnapshot,
    pub reference: &'a ParamSnapshot,
}

/// Scores every segment under the three snapshots and broadcasts the
/// trajectory's advantage to every scored position.
pub fn trajectory_loss(
    trace: &RolloutTrace,
    plan: &SegmentPlan,
    snapshots: &Snapshots<'_>,
    advantage: f64,
    config: ObjectiveConfig,
) -> Result<TrajectoryLoss> {
    let inputs = stepmerge::segment_inputs(trace, plan)?;
    let scored: usize = inputs.iter().map(|s| s.changed.len()).sum();
    let weight = 1.0 / scored.max(1) as f64;
    let mut objective_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut objectives = Vec::with_capacity(inputs.len());
    for input in inputs {
        let score = |snap: &ParamSnapshot| {
            model::log_probs_at(snap.params(), &input.state, &input.changed, &input.targets)
        };
        let old = score(snapshots.old)?;
        let new = if snapshots.current.shares_params(snapshots.old) {
            old.clone()
        } else {
            score(snapshots.current)?
        };
        let reference = score(snapshots.reference)?;
        let mut terms = Vec::with_capacity(input.changed.len());
        for (i, (&position, &target)) in input.changed.iter().zip(&input.targets).enumerate() {
            let term = PpoTerm {
                logp_old: old[i],
                logp_ref: reference[i],
                advantage,
                clip_eps: config.clip_eps,
                kl_beta: config.kl_beta,
            };
            objective_sum += term.objective(new[i]).0;
            kl_sum += term.kl(new[i]);
            terms.push(TokenTerm {
                position,
                target,
                weight,
                loss: term,
            });
        }
        objectives.push(StateObjective {
            state: input.state,
            terms,
        });
    }
    Ok(TrajectoryLoss {
        loss: -objective_sum * weight,
        mean_kl: kl_sum * weight,
        scored,
        objectives,
    })
}
