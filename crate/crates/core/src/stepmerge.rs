//! Segment-level likelihoods.
//!
//! For segment `[b_i, b_{i+1})` the changed set `C_i` holds the positions
//! committed at steps `b_i + 1 ..= b_{i+1}`. The segment is scored on the
//! final completion with `C_i` and every later-committed position re-masked,
//! i.e. the exact state the rollout held when the segment began. With unit
//! segments this reproduces the per-step scores of the rollout itself.

use crate::domain::{RolloutTrace, SegmentPlan, SequenceState, TokenId};
use crate::error::{Error, Result};
use crate::model::{self, ParamSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScore {
    pub index: usize,
    pub interval: (usize, usize),
    pub changed: Vec<usize>,
    /// Aligned with `changed`.
    pub logprobs: Vec<f64>,
}

/// Input of one segment's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub interval: (usize, usize),
    pub state: SequenceState,
    pub changed: Vec<usize>,
    pub targets: Vec<TokenId>,
}

fn check(trace: &RolloutTrace, plan: &SegmentPlan) -> Result<()> {
    if plan.steps() != trace.steps {
        return Err(Error::TMismatch {
            plan: plan.steps(),
            trace: trace.steps,
        });
    }
    Ok(())
}

pub fn changed_sets(trace: &RolloutTrace, plan: &SegmentPlan) -> Result<Vec<Vec<usize>>> {
    check(trace, plan)?;
    let commit = trace.commit_steps();
    Ok(plan
        .segments()
        .into_iter()
        .map(|(start, end)| {
            (0..trace.completion_len)
                .filter(|&p| commit[p] > start && commit[p] <= end)
                .collect()
        })
        .collect())
}

pub fn segment_inputs(trace: &RolloutTrace, plan: &SegmentPlan) -> Result<Vec<SegmentInput>> {
    let sets = changed_sets(trace, plan)?;
    Ok(plan
        .segments()
        .into_iter()
        .zip(sets)
        .map(|(interval, changed)| SegmentInput {
            interval,
            state: trace.state_entering(interval.0 + 1),
            targets: changed.iter().map(|&p| trace.final_tokens[p]).collect(),
            changed,
        })
        .collect())
}

pub fn segment_logprobs(
    trace: &RolloutTrace,
    plan: &SegmentPlan,
    snapshot: &ParamSnapshot,
) -> Result<Vec<SegmentScore>> {
    segment_inputs(trace, plan)?
        .into_iter()
        .enumerate()
        .map(|(index, input)| {
            let logprobs =
                model::log_probs_at(snapshot.params(), &input.state, &input.changed, &input.targets)?;
            Ok(SegmentScore {
                index,
                interval: input.interval,
                changed: input.changed,
                logprobs,
            })
        })
        .collect()
}
