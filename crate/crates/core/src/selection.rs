//! Adaptive step selection: map difficulty curves and a segment budget `N`
//! to a [`SegmentPlan`].
//!
//! A selected step `t` becomes boundary `t - 1`, so the selected step opens
//! its own segment. Boundaries outside `[1, T-1]` are dropped, which is why a
//! plan may end up with fewer than `N` segments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{validate_plan, DifficultyCurves, SegmentPlan};
use crate::error::{Error, Result};

/// RoEC spread below this counts as a flat curve and triggers the even partition.
pub const FLAT_SIGMA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveStats {
    pub mean: f64,
    /// Population standard deviation (divides by T).
    pub std: f64,
}

pub fn curve_stats(values: &[f64]) -> CurveStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    CurveStats {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    Uniform,
    Roec,
    Cm,
    Hybrid,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 4] = [Self::Uniform, Self::Roec, Self::Cm, Self::Hybrid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Roec => "roec",
            Self::Cm => "cm",
            Self::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown selection policy {s:?}")))
    }
}

/// A policy together with the RoEC threshold multiplier (`mu + k * sigma`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSelector {
    pub policy: SelectionPolicy,
    pub sigma_multiplier: f64,
}

impl StepSelector {
    pub fn new(policy: SelectionPolicy) -> Self {
        Self {
            policy,
            sigma_multiplier: 1.0,
        }
    }

    pub fn select(&self, curves: &DifficultyCurves, n: usize) -> Result<SegmentPlan> {
        match self.policy {
            SelectionPolicy::Uniform => select_uniform(curves.steps(), n),
            SelectionPolicy::Roec => roec_only(curves, n, self.sigma_multiplier),
            SelectionPolicy::Cm => select_cm_only(curves, n),
            SelectionPolicy::Hybrid => hybrid(curves, n, self.sigma_multiplier),
        }
    }
}

fn check_n(steps: usize, n: usize) -> Result<()> {
    if n == 0 || n > steps {
        return Err(Error::BadN { n, steps });
    }
    Ok(())
}

fn finish(mut splits: Vec<usize>, steps: usize, n: usize) -> Result<SegmentPlan> {
    splits.sort_unstable();
    splits.dedup();
    let mut boundaries = Vec::with_capacity(splits.len() + 2);
    boundaries.push(0);
    boundaries.extend(splits);
    boundaries.push(steps);
    validate_plan(&boundaries, steps, n)
}

/// Even partition: `b_i = floor(i * T / N)`.
pub fn select_uniform(steps: usize, n: usize) -> Result<SegmentPlan> {
    check_n(steps, n)?;
    let mut boundaries: Vec<usize> = (0..=n).map(|i| i * steps / n).collect();
    boundaries.dedup();
    validate_plan(&boundaries, steps, n)
}

/// Stage 0 and stage 1: `None` means the curves are ill-conditioned and the
/// caller should fall back to the even partition.
fn instability_splits(curves: &DifficultyCurves, n: usize, sigma_multiplier: f64) -> Option<Vec<usize>> {
    let steps = curves.steps();
    let stats = curve_stats(curves.roec());
    if steps < 2 * n || stats.std < FLAT_SIGMA {
        return None;
    }
    let threshold = stats.mean + sigma_multiplier * stats.std;
    let mut splits = Vec::with_capacity(n - 1);
    for (i, &r) in curves.roec().iter().enumerate() {
        if splits.len() == n - 1 {
            break;
        }
        // candidate step t = i + 1 maps to boundary i
        if r > threshold && (1..steps).contains(&i) && !splits.contains(&i) {
            splits.push(i);
        }
    }
    Some(splits)
}

/// Steps ranked by inverse margin, largest first; ties go to the earlier step.
fn steps_by_inv_margin(curves: &DifficultyCurves) -> Vec<usize> {
    let cm = curves.inv_margin();
    let mut order: Vec<usize> = (1..=cm.len()).collect();
    order.sort_by(|&a, &b| cm[b - 1].total_cmp(&cm[a - 1]).then(a.cmp(&b)));
    order
}

fn backfill_by_inv_margin(curves: &DifficultyCurves, n: usize, splits: &mut Vec<usize>) {
    let steps = curves.steps();
    for t in steps_by_inv_margin(curves) {
        if splits.len() >= n - 1 {
            break;
        }
        let b = t - 1;
        // steps already implied by a split (t - 1 in S) are skipped here too
        if (1..steps).contains(&b) && !splits.contains(&b) {
            splits.push(b);
        }
    }
}

fn hybrid(curves: &DifficultyCurves, n: usize, sigma_multiplier: f64) -> Result<SegmentPlan> {
    let steps = curves.steps();
    check_n(steps, n)?;
    let Some(mut splits) = instability_splits(curves, n, sigma_multiplier) else {
        return select_uniform(steps, n);
    };
    backfill_by_inv_margin(curves, n, &mut splits);
    finish(splits, steps, n)
}

fn roec_only(curves: &DifficultyCurves, n: usize, sigma_multiplier: f64) -> Result<SegmentPlan> {
    let steps = curves.steps();
    check_n(steps, n)?;
    let Some(mut splits) = instability_splits(curves, n, sigma_multiplier) else {
        return select_uniform(steps, n);
    };
    let even = select_uniform(steps, n)?;
    for &b in &even.boundaries()[1..n] {
        if splits.len() >= n - 1 {
            break;
        }
        if !splits.contains(&b) {
            splits.push(b);
        }
    }
    finish(splits, steps, n)
}

/// Hybrid RoEC+CM selection: instability spikes first, then backfill by
/// inverse confidence margin; flat or short curves fall back to the even
/// partition.
pub fn select_hybrid(curves: &DifficultyCurves, n: usize) -> Result<SegmentPlan> {
    hybrid(curves, n, 1.0)
}

/// RoEC spikes first, then evenly spaced boundaries.
pub fn select_roec_only(curves: &DifficultyCurves, n: usize) -> Result<SegmentPlan> {
    roec_only(curves, n, 1.0)
}

/// Top inverse-margin steps only; no fallback guard.
pub fn select_cm_only(curves: &DifficultyCurves, n: usize) -> Result<SegmentPlan> {
    let steps = curves.steps();
    check_n(steps, n)?;
    let mut splits = Vec::with_capacity(n - 1);
    backfill_by_inv_margin(curves, n, &mut splits);
    finish(splits, steps, n)
}

pub fn segments_of(plan: &SegmentPlan) -> Vec<(usize, usize)> {
    plan.segments()
}
