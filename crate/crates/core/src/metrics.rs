//! Step-level difficulty signals and their batch averages.
//!
//! All reductions sum in index order so results are bit-reproducible no
//! matter how the per-rollout work was scheduled.

use crate::domain::{DifficultyCurves, ProbVector, RolloutTrace};
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN_EPS: f64 = 1e-6;

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    let h: f64 = p
        .values()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    // rounding can leave a one-hot vector at -0.0 or a tiny negative
    h.max(0.0)
}

/// Gap between the two largest probabilities.
pub fn confidence_margin(p: &ProbVector) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p.values() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        return first.max(0.0);
    }
    first - second
}

pub fn inverse_margin(p: &ProbVector, eps_margin: f64) -> f64 {
    1.0 / confidence_margin(p).max(eps_margin)
}

/// `D_KL(p || q)`. With `eps_smooth > 0`, `q` is smoothed towards uniform first.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector, eps_smooth: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let norm = 1.0 + p.len() as f64 * eps_smooth;
    let mut kl = 0.0;
    for (i, (&pv, &qv)) in p.values().iter().zip(q.values()).enumerate() {
        if pv <= 0.0 {
            continue;
        }
        let qs = if eps_smooth > 0.0 {
            (qv + eps_smooth) / norm
        } else {
            qv
        };
        if qs <= 0.0 {
            return Err(Error::QHasZeroSupport(i));
        }
        kl += pv * (pv / qs).ln();
    }
    Ok(kl.max(0.0))
}

/// Mean entropy and mean inverse margin over the positions predicted at one step.
pub fn step_means(dists: &[ProbVector], eps_margin: f64) -> Result<(f64, f64)> {
    if dists.is_empty() {
        return Err(Error::EmptyStep(0));
    }
    let m = dists.len() as f64;
    let h = dists.iter().map(shannon_entropy).sum::<f64>() / m;
    let cm = dists
        .iter()
        .map(|p| inverse_margin(p, eps_margin))
        .sum::<f64>()
        / m;
    Ok((h, cm))
}

/// `RoEC[1] = 0`, `RoEC[t] = |H[t] - H[t-1]|`.
pub fn roec_curve(entropy: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(entropy.len());
    if !entropy.is_empty() {
        out.push(0.0);
    }
    out.extend(entropy.windows(2).map(|w| (w[1] - w[0]).abs()));
    out
}

/// Unweighted mean over rollouts of each rollout's per-step means.
pub fn batch_mean_curves<'a, I>(traces: I) -> Result<DifficultyCurves>
where
    I: IntoIterator<Item = &'a RolloutTrace>,
{
    let mut iter = traces.into_iter();
    let first = iter.next().ok_or(Error::EmptyBatch)?;
    let steps = first.steps;
    let mut h = vec![0.0; steps];
    let mut cm = vec![0.0; steps];
    let mut count = 0usize;
    for trace in std::iter::once(first).chain(iter) {
        if trace.steps != steps || trace.records.len() != steps {
            return Err(Error::MixedT(steps, trace.steps));
        }
        for (i, rec) in trace.records.iter().enumerate() {
            h[i] += rec.mean_entropy;
            cm[i] += rec.mean_inv_margin;
        }
        count += 1;
    }
    let n = count as f64;
    h.iter_mut().for_each(|v| *v /= n);
    cm.iter_mut().for_each(|v| *v /= n);
    DifficultyCurves::from_series(h, cm)
}
