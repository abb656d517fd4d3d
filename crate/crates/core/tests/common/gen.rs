//! Random inputs: distributions, difficulty curves and rollouts.

use atpo::model::{init_params_scaled, ModelDims, ParamSnapshot, SnapshotLabel};
use atpo::sampler::{rollout_with_states, DecodeMode, DecodeSpec};
use atpo::{validate_prob, DifficultyCurves, ProbVector, RolloutTrace, SequenceState, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random distribution over `v` entries; some sharply peaked, some nearly flat.
pub fn distribution(rng: &mut ChaCha8Rng, v: usize) -> ProbVector {
    let power: f64 = [0.2, 1.0, 3.0, 8.0][rng.gen_range(0..4)];
    let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().max(1e-12).powf(power)).collect();
    let sum: f64 = raw.iter().sum();
    validate_prob(&raw.iter().map(|x| x / sum).collect::<Vec<_>>()).unwrap()
}

fn entropy_series(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let top = 13f64.ln();
    match rng.gen_range(0..6) {
        0 => (0..t).map(|_| rng.gen_range(0.0..top)).collect(),
        1 => {
            let base = rng.gen_range(0.5..2.0);
            (0..t)
                .map(|_| if rng.gen_bool(0.15) { base + rng.gen_range(0.1..0.5) } else { base })
                .collect()
        }
        2 => (0..t).map(|_| rng.gen_range(0..5) as f64 * 0.5).collect(),
        3 => vec![rng.gen_range(0.0..top); t],
        4 => {
            let base = rng.gen_range(0.0..top);
            (0..t).map(|_| base + rng.gen_range(0.0..1e-12)).collect()
        }
        _ => {
            let mut h = top;
            (0..t)
                .map(|_| {
                    h = (h - rng.gen_range(0.0..0.3) + rng.gen_range(-0.05..0.05)).max(0.0);
                    h
                })
                .collect()
        }
    }
}

fn inv_margin_series(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    match rng.gen_range(0..4) {
        0 => (0..t).map(|_| rng.gen_range(1..5) as f64).collect(),
        1 => vec![rng.gen_range(1.0..10.0); t],
        _ => (0..t).map(|_| rng.gen_range(0.0f64..7.0).exp()).collect(),
    }
}

pub fn curves(rng: &mut ChaCha8Rng, t: usize) -> DifficultyCurves {
    let h = entropy_series(rng, t);
    let cm = inv_margin_series(rng, t);
    DifficultyCurves::from_series(h, cm).unwrap()
}

/// Curves whose RoEC spread is below the flatness threshold.
pub fn flat_curves(rng: &mut ChaCha8Rng, t: usize) -> DifficultyCurves {
    let base = rng.gen_range(0.0..2.5);
    let jitter = if rng.gen_bool(0.5) { 0.0 } else { 1e-12 };
    let h = (0..t).map(|_| base + rng.gen_range(0.0..=jitter)).collect();
    DifficultyCurves::from_series(h, inv_margin_series(rng, t)).unwrap()
}

pub struct Rollout {
    pub trace: RolloutTrace,
    pub states: Vec<SequenceState>,
    pub snapshot: ParamSnapshot,
}

pub fn prompt(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(1..14)).collect()
}

/// A rollout with random shape, random parameters and random decoding mode.
pub fn rollout(rng: &mut ChaCha8Rng, greedy: bool) -> Rollout {
    let completion_len = rng.gen_range(1..=16);
    let dims = ModelDims {
        vocab: 14,
        prompt_len: rng.gen_range(1..=8),
        completion_len,
        d_model: [4, 8, 16][rng.gen_range(0..3)],
    };
    let scale = [0.02, 0.3, 1.0][rng.gen_range(0..3)];
    let params = init_params_scaled(rng.gen(), dims, scale);
    let snapshot = ParamSnapshot::new(SnapshotLabel::Old, &params);
    let spec = DecodeSpec {
        steps: rng.gen_range(1..=completion_len),
        completion_len,
        temperature: rng.gen_range(0.5..1.5),
        mode: if greedy { DecodeMode::Greedy } else { DecodeMode::Sample },
        seed: rng.gen(),
        margin_eps: 1e-6,
    };
    let p = prompt(rng, dims.prompt_len);
    let (trace, states) = rollout_with_states(&snapshot, rng.gen(), rng.gen(), &p, &spec).unwrap();
    Rollout {
        trace,
        states,
        snapshot,
    }
}
