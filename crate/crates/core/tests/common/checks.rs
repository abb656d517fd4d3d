//! Property and oracle checks shared by the focused test files and the
//! acceptance run.

use std::time::Instant;

use atpo::metrics::{confidence_margin, inverse_margin, kl_divergence, shannon_entropy};
use atpo::model::{
    init_params_scaled, loss_and_grad, log_probs_at, softmax, completion_distributions, ModelDims,
    ModelParams, NegLogLik, StateObjective, TokenTerm,
};
use atpo::rl::{group_advantages, token_objective, PpoTerm};
use atpo::sampler::stepwise_logprobs;
use atpo::selection::{select_cm_only, select_hybrid, select_roec_only, select_uniform, SelectionPolicy, StepSelector};
use atpo::stepmerge::{changed_sets, segment_logprobs};
use atpo::{validate_plan, SegmentPlan, SequenceState};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::brute;
use super::gen;
use super::precise::Precise;
use super::Check;

pub const METRIC_REL_TOL: f64 = 1e-9;
pub const METRIC_CASES: usize = 1000;
pub const ORACLE_SECONDS: f64 = 5.0;
pub const SELECTION_CASES: usize = 500;
pub const FALLBACK_CASES: usize = 100;
pub const PARTITION_CASES: usize = 200;
pub const IDENTITY_CASES: usize = 50;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_COORDS: usize = 50;
pub const SOFTMAX_TOL: f64 = 1e-6;
pub const ADV_SUM_TOL: f64 = 1e-9;
pub const OBJECTIVE_TOL: f64 = 1e-12;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(start: Instant, limit: f64, what: &str) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    ensure(s < limit, || format!("{what} took {s:.2} s, limit {limit} s"))?;
    Ok(s)
}

pub fn metric_oracle(seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = gen::rng(seed);
    let precise = Precise::new();
    let mut worst = [0.0f64; 4];
    for case in 0..METRIC_CASES {
        let v = rng.gen_range(2..=64);
        let p = gen::distribution(&mut rng, v);
        let q = gen::distribution(&mut rng, v);
        let eps_margin = 1e-6;
        let eps_smooth = if case % 2 == 0 { 0.0 } else { 1e-10 };
        let checks = [
            (shannon_entropy(&p), precise.entropy(p.values())),
            (confidence_margin(&p), precise.margin(p.values())),
            (inverse_margin(&p, eps_margin), precise.inv_margin(p.values(), eps_margin)),
            (
                kl_divergence(&p, &q, eps_smooth).map_err(|e| e.to_string())?,
                precise.kl(p.values(), q.values(), eps_smooth),
            ),
        ];
        for (k, (value, exact)) in checks.iter().enumerate() {
            if exact.is_zero() {
                ensure(*value == 0.0, || format!("case {case} metric {k}: {value} vs exact 0"))?;
                continue;
            }
            let e = precise.rel_err(*value, exact);
            worst[k] = worst[k].max(e);
            ensure(e <= METRIC_REL_TOL, || {
                format!("case {case} (V={v}) metric {k}: relative error {e:e}")
            })?;
        }
    }
    let s = timed(start, ORACLE_SECONDS, "metric oracle")?;
    Ok(format!(
        "{METRIC_CASES} cases, worst rel err H {:.1e} CM {:.1e} CMinv {:.1e} KL {:.1e}, {s:.2} s",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

pub fn selection_oracle(seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = gen::rng(seed);
    let mut fallbacks = 0;
    for case in 0..SELECTION_CASES {
        let t = rng.gen_range(4..=64);
        let n = rng.gen_range(1..=8usize.min(t));
        let curves = gen::curves(&mut rng, t);
        let c = brute::Curve::new(curves.entropy(), curves.inv_margin());
        let pairs: [(&str, Vec<usize>, Vec<usize>); 3] = [
            ("hybrid", select_hybrid(&curves, n).map_err(|e| e.to_string())?.boundaries().to_vec(), brute::hybrid(&c, n)),
            ("roec", select_roec_only(&curves, n).map_err(|e| e.to_string())?.boundaries().to_vec(), brute::roec_only(&c, n)),
            ("cm", select_cm_only(&curves, n).map_err(|e| e.to_string())?.boundaries().to_vec(), brute::cm_only(&c, n)),
        ];
        for (name, got, want) in pairs {
            ensure(got == want, || format!("case {case} T={t} N={n} {name}: {got:?} vs oracle {want:?}"))?;
        }
        if brute::hybrid(&c, n) == brute::uniform(t, n) {
            fallbacks += 1;
        }
    }
    let s = timed(start, ORACLE_SECONDS, "selection oracle")?;
    Ok(format!(
        "{SELECTION_CASES} curves x 3 policies agree ({fallbacks} hybrid plans equal the even partition), {s:.2} s"
    ))
}

pub fn fallback(seed: u64) -> Check {
    let mut rng = gen::rng(seed);
    let (mut flat, mut short) = (0, 0);
    for case in 0..FALLBACK_CASES {
        let (curves, n) = if case % 2 == 0 {
            let t = rng.gen_range(2..=64);
            flat += 1;
            (gen::flat_curves(&mut rng, t), rng.gen_range(1..=t.min(8)))
        } else {
            let n = rng.gen_range(2..=8);
            let t = rng.gen_range(n..2 * n);
            short += 1;
            (gen::curves(&mut rng, t), n)
        };
        let t = curves.steps();
        let hybrid = select_hybrid(&curves, n).map_err(|e| e.to_string())?;
        let even = select_uniform(t, n).map_err(|e| e.to_string())?;
        ensure(hybrid == even, || {
            format!("case {case} T={t} N={n}: {:?} vs {:?}", hybrid.boundaries(), even.boundaries())
        })?;
    }
    Ok(format!("{flat} flat-RoEC and {short} T < 2N cases equal the even partition"))
}

fn random_plan(rng: &mut ChaCha8Rng, t: usize) -> (SegmentPlan, usize) {
    let n = rng.gen_range(1..=t.min(8));
    if rng.gen_bool(0.5) {
        let policy = *SelectionPolicy::ALL.choose(rng).unwrap();
        let curves = gen::curves(rng, t);
        (StepSelector::new(policy).select(&curves, n).unwrap(), n)
    } else {
        let mut inner: Vec<usize> = (1..t).collect();
        inner.shuffle(rng);
        inner.truncate(rng.gen_range(0..n));
        inner.sort_unstable();
        let mut b = vec![0];
        b.extend(inner);
        b.push(t);
        (validate_plan(&b, t, n).unwrap(), n)
    }
}

pub fn partition(seed: u64) -> Check {
    let mut rng = gen::rng(seed);
    let mut segments = 0;
    for case in 0..PARTITION_CASES {
        let greedy = rng.gen_bool(0.5);
        let r = gen::rollout(&mut rng, greedy);
        let trace = &r.trace;
        let (plan, n) = random_plan(&mut rng, trace.steps);
        let b = plan.boundaries();
        ensure(b[0] == 0 && *b.last().unwrap() == trace.steps, || format!("case {case}: ends {b:?}"))?;
        ensure(b.windows(2).all(|w| w[0] < w[1]), || format!("case {case}: not increasing {b:?}"))?;
        ensure(plan.num_segments() <= n, || format!("case {case}: {} segments > N={n}", plan.num_segments()))?;
        let sets = changed_sets(trace, &plan).map_err(|e| e.to_string())?;
        let mut seen = vec![0u32; trace.completion_len];
        for set in &sets {
            for &p in set {
                seen[p] += 1;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || format!("case {case}: coverage counts {seen:?}"))?;
        segments += sets.len();
    }
    Ok(format!("{PARTITION_CASES} (trace, plan) pairs, {segments} segments, every position in exactly one changed set"))
}

pub fn stepmerge_identity(seed: u64) -> Check {
    let mut rng = gen::rng(seed);
    let mut worst: f64 = 0.0;
    let mut tokens = 0;
    for case in 0..IDENTITY_CASES {
        let r = gen::rollout(&mut rng, true);
        let trace = &r.trace;
        let unit = SegmentPlan::unit(trace.steps);
        let merged = segment_logprobs(trace, &unit, &r.snapshot).map_err(|e| e.to_string())?;
        let stepwise = stepwise_logprobs(trace, &r.snapshot).map_err(|e| e.to_string())?;
        ensure(merged.len() == stepwise.len(), || format!("case {case}: segment count"))?;
        for (t, (seg, step)) in merged.iter().zip(&stepwise).enumerate() {
            let positions: Vec<usize> = step.iter().map(|s| s.0).collect();
            ensure(seg.changed == positions, || format!("case {case} step {}: positions differ", t + 1))?;
            let targets: Vec<_> = positions.iter().map(|&p| trace.final_tokens[p]).collect();
            let live = log_probs_at(r.snapshot.params(), &r.states[t], &positions, &targets)
                .map_err(|e| e.to_string())?;
            for ((&a, &(_, b)), &c) in seg.logprobs.iter().zip(step).zip(&live) {
                let d = (a - b).abs().max((a - c).abs());
                worst = worst.max(d);
                ensure(d <= IDENTITY_TOL, || format!("case {case} step {}: {a} vs {b} vs {c}", t + 1))?;
                tokens += 1;
            }
        }
    }
    Ok(format!("{IDENTITY_CASES} greedy rollouts, {tokens} tokens, max |diff| {worst:.1e}"))
}

fn grad_dims() -> ModelDims {
    ModelDims {
        vocab: 14,
        prompt_len: 8,
        completion_len: 16,
        d_model: 32,
    }
}

fn nll_objectives(rng: &mut ChaCha8Rng) -> Vec<StateObjective<NegLogLik>> {
    (0..2)
        .map(|_| {
            let prompt = gen::prompt(rng, 8);
            let completion = (0..16)
                .map(|_| if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..14) })
                .collect();
            let state = SequenceState::new(prompt, completion).unwrap();
            let terms = state
                .masked_positions()
                .into_iter()
                .map(|position| TokenTerm {
                    position,
                    target: rng.gen_range(1..14),
                    weight: rng.gen_range(-1.0..1.0),
                    loss: NegLogLik,
                })
                .collect();
            StateObjective { state, terms }
        })
        .collect()
}

fn loss_at(params: &ModelParams, objs: &[StateObjective<NegLogLik>]) -> f64 {
    loss_and_grad(params, objs).unwrap().0
}

pub fn gradients(seeds: &[u64]) -> Check {
    let mut worst: f64 = 0.0;
    for &seed in seeds {
        let mut rng = gen::rng(seed);
        let params = init_params_scaled(seed, grad_dims(), 0.3);
        let objs = nll_objectives(&mut rng);
        let (_, grad) = loss_and_grad(&params, &objs).map_err(|e| e.to_string())?;
        for _ in 0..FD_COORDS {
            let i = rng.gen_range(0..params.len());
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= FD_STEP;
            let numeric = (loss_at(&plus, &objs) - loss_at(&minus, &objs)) / (2.0 * FD_STEP);
            let analytic = grad.as_slice()[i];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
            ensure(rel <= FD_REL_TOL, || {
                format!("seed {seed} coord {i}: analytic {analytic:e} numeric {numeric:e}")
            })?;
        }
    }
    Ok(format!("{} seeds x {FD_COORDS} coords, worst rel err {worst:.1e}", seeds.len()))
}

pub fn softmax_rows(seed: u64) -> Check {
    let mut rng = gen::rng(seed);
    let mut worst: f64 = 0.0;
    let mut check = |p: &[f64]| -> Result<(), String> {
        let s: f64 = p.iter().sum();
        worst = worst.max((s - 1.0).abs());
        ensure((s - 1.0).abs() <= SOFTMAX_TOL && p.iter().all(|x| x.is_finite()), || {
            format!("row sums to {s}")
        })
    };
    for _ in 0..200 {
        let v = rng.gen_range(2..=64);
        let shift = rng.gen_range(-1e4..1e4);
        let logits: Vec<f64> = (0..v).map(|_| shift + rng.gen_range(-1e4..1e4)).collect();
        check(&softmax(&logits))?;
    }
    let dims = grad_dims();
    for scale in [10.0, 100.0, 1000.0] {
        let params = init_params_scaled(rng.gen(), dims, scale);
        let state = SequenceState::fully_masked(gen::prompt(&mut rng, 8), 16).unwrap();
        let rows = completion_distributions(&params, &state, &(0..16).collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
        for row in &rows {
            check(row.values())?;
        }
    }
    Ok(format!("max |sum - 1| {worst:.1e} over +-1e4 logits and huge-weight forward passes"))
}

pub fn advantages_and_objective(seed: u64) -> Check {
    let mut rng = gen::rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = if case % 2 == 0 {
            (0..g).map(|_| rng.gen_range(0..2) as f64).collect()
        } else {
            (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect()
        };
        if rewards.iter().all(|&r| r == rewards[0]) {
            continue;
        }
        let s: f64 = group_advantages(&rewards, 1e-8).iter().sum();
        worst = worst.max(s.abs());
        ensure(s.abs() <= ADV_SUM_TOL, || format!("case {case}: advantages sum to {s:e}"))?;
    }

    let ln15 = 1.5f64.ln();
    let examples = [
        (token_objective(-0.7, -0.7, -0.7, 1.0, 0.2, 0.5), 1.0),
        (token_objective(ln15, 0.0, ln15, 1.0, 0.2, 0.0), 1.2),
        (token_objective(ln15, 0.0, ln15, -1.0, 0.2, 0.0), -1.5),
    ];
    for (k, (got, want)) in examples.iter().enumerate() {
        ensure((got - want).abs() <= OBJECTIVE_TOL, || format!("clip example {k}: {got} vs {want}"))?;
    }

    let dims = grad_dims();
    let mut gains = Vec::new();
    for _ in 0..5 {
        let mut params = init_params_scaled(rng.gen(), dims, 0.1);
        let state = SequenceState::fully_masked(gen::prompt(&mut rng, 8), 16).unwrap();
        let position = rng.gen_range(0..16);
        let target = rng.gen_range(1..14);
        let before = log_probs_at(&params, &state, &[position], &[target]).unwrap()[0];
        let term = PpoTerm {
            logp_old: before,
            logp_ref: before,
            advantage: 1.0,
            clip_eps: 0.2,
            kl_beta: 0.01,
        };
        let objective = StateObjective {
            state: state.clone(),
            terms: vec![TokenTerm {
                position,
                target,
                weight: 1.0,
                loss: term,
            }],
        };
        let (_, grad) = loss_and_grad(&params, &[objective]).unwrap();
        for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *p -= 1e-2 * g;
        }
        let after = log_probs_at(&params, &state, &[position], &[target]).unwrap()[0];
        ensure(after > before, || format!("logp went from {before} to {after}"))?;
        gains.push(after - before);
    }
    let min_gain = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "max |sum A| {worst:.1e}; clip examples exact to {OBJECTIVE_TOL:e}; single-token logp gain >= {min_gain:.2e}"
    ))
}
