//! Instrumented denoising rollouts.
//!
//! A rollout starts from a fully masked completion and runs `T` steps. At
//! each step the model predicts every still-masked position; the step's mean
//! entropy and mean inverse margin over those positions are recorded, the
//! `k_t` most confident positions are committed, and committed tokens are
//! never revisited.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{RolloutTrace, SequenceState, StepRecord, TokenId};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, ModelParams, ParamSnapshot};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSpec {
    pub steps: usize,
    pub completion_len: usize,
    pub temperature: f64,
    pub mode: DecodeMode,
    pub seed: u64,
    pub margin_eps: f64,
}

impl DecodeSpec {
    pub fn greedy(steps: usize, completion_len: usize) -> Self {
        Self {
            steps,
            completion_len,
            temperature: 1.0,
            mode: DecodeMode::Greedy,
            seed: 0,
            margin_eps: metrics::DEFAULT_MARGIN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > self.completion_len {
            return Err(Error::BadShape(format!(
                "need 1 <= T <= L, got T={} L={}",
                self.steps, self.completion_len
            )));
        }
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(Error::BadShape(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.margin_eps > 0.0) {
            return Err(Error::BadShape("margin epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Tokens committed per step: `k_t = ceil(m_t / (T - t + 1))`.
pub fn commit_schedule(completion_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > completion_len {
        return Err(Error::BadShape(format!(
            "need 1 <= T <= L, got T={steps} L={completion_len}"
        )));
    }
    let mut remaining = completion_len;
    Ok((1..=steps)
        .map(|t| {
            let k = remaining.div_ceil(steps - t + 1);
            remaining -= k;
            k
        })
        .collect())
}

fn sample_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> TokenId {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let probs = model::softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = v;
        if u < acc {
            return v as TokenId;
        }
    }
    last as TokenId
}

fn run_rollout(
    params: &ModelParams,
    prompt_id: u64,
    rollout_id: u64,
    prompt: &[TokenId],
    spec: &DecodeSpec,
    mut keep_states: Option<&mut Vec<SequenceState>>,
) -> Result<RolloutTrace> {
    spec.validate()?;
    let schedule = commit_schedule(spec.completion_len, spec.steps)?;
    let mut state = SequenceState::fully_masked(prompt.to_vec(), spec.completion_len)?;
    let mut rng = rng::keyed(spec.seed, Domain::Rollout, &[prompt_id, rollout_id]);
    let mut records = Vec::with_capacity(spec.steps);

    for (i, &k) in schedule.iter().enumerate() {
        if let Some(states) = keep_states.as_deref_mut() {
            states.push(state.clone());
        }
        let masked = state.masked_positions();
        let logits = model::completion_logits(params, &state, &masked)?;
        let dists = model::distributions(&logits)?;
        let (mean_entropy, mean_inv_margin) = metrics::step_means(&dists, spec.margin_eps)
            .map_err(|_| Error::EmptyStep(i + 1))?;

        let mut order: Vec<usize> = (0..masked.len()).collect();
        let top: Vec<(usize, f64)> = dists.iter().map(|p| p.top1()).collect();
        order.sort_by(|&a, &b| top[b].1.total_cmp(&top[a].1).then(masked[a].cmp(&masked[b])));
        order.truncate(k);
        // draws happen in position order
        order.sort_by_key(|&j| masked[j]);

        let mut transfer = Vec::with_capacity(k);
        for j in order {
            let token = match spec.mode {
                DecodeMode::Greedy => top[j].0 as TokenId,
                DecodeMode::Sample => sample_token(&logits[j], spec.temperature, &mut rng),
            };
            state.commit(masked[j], token);
            transfer.push(masked[j]);
        }
        records.push(StepRecord {
            t: i + 1,
            masked_count: masked.len(),
            transfer_positions: transfer,
            mean_entropy,
            mean_inv_margin,
        });
    }

    Ok(RolloutTrace {
        prompt_id,
        rollout_id,
        steps: spec.steps,
        completion_len: spec.completion_len,
        reward: 0.0,
        correct: false,
        prompt_tokens: prompt.to_vec(),
        records,
        final_tokens: state.completion().to_vec(),
    })
}

/// Generates one trace. Reward and correctness are left for the task to fill in.
pub fn rollout(
    snapshot: &ParamSnapshot,
    prompt_id: u64,
    rollout_id: u64,
    prompt: &[TokenId],
    spec: &DecodeSpec,
) -> Result<RolloutTrace> {
    run_rollout(snapshot.params(), prompt_id, rollout_id, prompt, spec, None)
}

/// Same as [`rollout`], also returning the state held at the start of each step.
pub fn rollout_with_states(
    snapshot: &ParamSnapshot,
    prompt_id: u64,
    rollout_id: u64,
    prompt: &[TokenId],
    spec: &DecodeSpec,
) -> Result<(RolloutTrace, Vec<SequenceState>)> {
    let mut states = Vec::with_capacity(spec.steps);
    let trace = run_rollout(snapshot.params(), prompt_id, rollout_id, prompt, spec, Some(&mut states))?;
    Ok((trace, states))
}

/// Per step, `(position, logp)` of each committed token, scored on that step's
/// reconstructed entering state.
pub fn stepwise_logprobs(trace: &RolloutTrace, snapshot: &ParamSnapshot) -> Result<Vec<Vec<(usize, f64)>>> {
    (1..=trace.steps)
        .map(|t| {
            let state = trace.state_entering(t);
            let positions = &trace.records[t - 1].transfer_positions;
            let targets: Vec<TokenId> = positions.iter().map(|&p| trace.final_tokens[p]).collect();
            let lp = model::log_probs_at(snapshot.params(), &state, positions, &targets)?;
            Ok(positions.iter().copied().zip(lp).collect())
        })
        .collect()
}
