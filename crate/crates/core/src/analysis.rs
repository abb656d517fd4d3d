//! Outcome-conditioned uncertainty curves, eval-reward comparison tables and
//! selection-overhead ratios. Outputs are tab- or comma-separated text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::domain::{DifficultyCurves, RolloutTrace};
use crate::error::{Error, Result};
use crate::metrics::batch_mean_curves;
use crate::trace_io::{self, RunRecord, TimingRecord, CURVES_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeCurves {
    /// `None` when the subset is empty.
    pub correct: Option<DifficultyCurves>,
    pub incorrect: Option<DifficultyCurves>,
    pub correct_count: usize,
    pub incorrect_count: usize,
}

impl OutcomeCurves {
    pub fn total(&self) -> usize {
        self.correct_count + self.incorrect_count
    }
}

pub fn outcome_curves(traces: &[RolloutTrace]) -> Result<OutcomeCurves> {
    let first = traces.first().ok_or(Error::EmptyBatch)?;
    if let Some(bad) = traces.iter().find(|t| t.steps != first.steps) {
        return Err(Error::MixedT(first.steps, bad.steps));
    }
    let subset = |flag: bool| {
        let chosen: Vec<&RolloutTrace> = traces.iter().filter(|t| t.correct == flag).collect();
        let curves = if chosen.is_empty() {
            None
        } else {
            Some(batch_mean_curves(chosen.iter().copied())?)
        };
        Ok::<_, Error>((curves, chosen.len()))
    };
    let (correct, correct_count) = subset(true)?;
    let (incorrect, incorrect_count) = subset(false)?;
    Ok(OutcomeCurves {
        correct,
        incorrect,
        correct_count,
        incorrect_count,
    })
}

/// Writes `correct.csv`, `incorrect.csv` (header only when empty) and `counts.tsv`.
pub fn write_outcome_curves(dir: &Path, curves: &OutcomeCurves) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, c) in [("correct.csv", &curves.correct), ("incorrect.csv", &curves.incorrect)] {
        let path = dir.join(name);
        match c {
            Some(c) => trace_io::write_curves(&path, c)?,
            None => fs::write(&path, format!("{CURVES_HEADER}\n")).map_err(|e| Error::io(&path, e))?,
        }
    }
    let path = dir.join("counts.tsv");
    let text = format!(
        "subset\tcount\ncorrect\t{}\nincorrect\t{}\n",
        curves.correct_count, curves.incorrect_count
    );
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Mean eval reward per evaluated iteration, one column per run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub labels: Vec<String>,
    pub iterations: Vec<usize>,
    /// `values[row][column]`.
    pub values: Vec<Vec<f64>>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iteration");
        for l in &self.labels {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for (it, row) in self.iterations.iter().zip(&self.values) {
            let _ = write!(out, "{it}");
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.values.iter().map(|r| r[j]).collect())
    }

    /// Last row, i.e. the final evaluation of every run.
    pub fn final_row(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }
}

fn eval_points(records: &[RunRecord]) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter_map(|r| r.eval_reward.map(|v| (r.iteration, v)))
        .collect()
}

pub fn compare_runs(runs: &[(String, Vec<RunRecord>)]) -> Result<ComparisonTable> {
    let (first_label, first) = runs
        .first()
        .ok_or_else(|| Error::GridMismatch("no runs given".into()))?;
    let grid: Vec<usize> = eval_points(first).iter().map(|p| p.0).collect();
    let mut columns = Vec::with_capacity(runs.len());
    for (label, records) in runs {
        let points = eval_points(records);
        let its: Vec<usize> = points.iter().map(|p| p.0).collect();
        if its != grid {
            return Err(Error::GridMismatch(format!(
                "run {label:?} evaluates at {its:?}, run {first_label:?} at {grid:?}"
            )));
        }
        columns.push(points.into_iter().map(|p| p.1).collect::<Vec<_>>());
    }
    Ok(ComparisonTable {
        labels: runs.iter().map(|r| r.0.clone()).collect(),
        values: (0..grid.len())
            .map(|i| columns.iter().map(|c| c[i]).collect())
            .collect(),
        iterations: grid,
    })
}

/// Mean seconds per iteration, per phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMeans {
    pub rollout: f64,
    pub metric: f64,
    pub selection: f64,
    pub scoring: f64,
    pub update: f64,
}

impl PhaseMeans {
    pub fn of(timings: &[TimingRecord]) -> Self {
        let n = timings.len().max(1) as f64;
        let mean = |f: fn(&TimingRecord) -> f64| timings.iter().map(f).sum::<f64>() / n;
        Self {
            rollout: mean(|t| t.rollout),
            metric: mean(|t| t.metric),
            selection: mean(|t| t.selection),
            scoring: mean(|t| t.scoring),
            update: mean(|t| t.update),
        }
    }

    pub fn total(&self) -> f64 {
        self.rollout + self.metric + self.selection + self.scoring + self.update
    }

    pub fn phases(&self) -> [(&'static str, f64); 5] {
        [
            ("rollout", self.rollout),
            ("metric", self.metric),
            ("selection", self.selection),
            ("scoring", self.scoring),
            ("update", self.update),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadReport {
    /// Mean adaptive iteration time over mean uniform iteration time.
    pub ratio: f64,
    pub adaptive: PhaseMeans,
    pub uniform: PhaseMeans,
}

impl OverheadReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("phase\tadaptive_s\tuniform_s\n");
        for ((name, a), (_, u)) in self.adaptive.phases().iter().zip(self.uniform.phases()) {
            let _ = writeln!(out, "{name}\t{a}\t{u}");
        }
        let _ = writeln!(out, "total\t{}\t{}", self.adaptive.total(), self.uniform.total());
        let _ = writeln!(out, "ratio\t{}", self.ratio);
        out
    }
}

pub fn selection_overhead(adaptive: &[TimingRecord], uniform: &[TimingRecord]) -> Result<OverheadReport> {
    if adaptive.is_empty() {
        return Err(Error::MissingTimings("adaptive run has no timing records".into()));
    }
    if uniform.is_empty() {
        return Err(Error::MissingTimings("uniform run has no timing records".into()));
    }
    let adaptive = PhaseMeans::of(adaptive);
    let uniform = PhaseMeans::of(uniform);
    Ok(OverheadReport {
        ratio: adaptive.total() / uniform.total(),
        adaptive,
        uniform,
    })
}

/// Reads a timings file, reporting an absent or empty file as missing timings.
pub fn load_timings(path: &Path) -> Result<Vec<TimingRecord>> {
    if !path.exists() {
        return Err(Error::MissingTimings(format!("{} does not exist", path.display())));
    }
    Ok(trace_io::read_timings(path)?.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::StepRecord;

    fn trace(correct: bool, h: f64) -> RolloutTrace {
        RolloutTrace {
            prompt_id: 0,
            rollout_id: 0,
            steps: 2,
            completion_len: 2,
            reward: if correct { 1.0 } else { 0.0 },
            correct,
            prompt_tokens: vec![2, 13],
            records: (1..=2)
                .map(|t| StepRecord {
                    t,
                    masked_count: 3 - t,
                    transfer_positions: vec![t - 1],
                    mean_entropy: h,
                    mean_inv_margin: 2.0 * h,
                })
                .collect(),
            final_tokens: vec![2, 3],
        }
    }

    #[test]
    fn outcome_split_examples() {
        let ts = [trace(true, 1.0), trace(true, 1.0), trace(false, 2.0), trace(false, 2.0)];
        let oc = outcome_curves(&ts).unwrap();
        assert_eq!((oc.correct_count, oc.incorrect_count), (2, 2));
        assert_eq!(oc.correct.unwrap().entropy(), &[1.0, 1.0]);
        assert_eq!(oc.incorrect.unwrap().entropy(), &[2.0, 2.0]);

        let only = outcome_curves(&ts[..1]).unwrap();
        assert_eq!(only.incorrect_count, 0);
        assert!(only.incorrect.is_none());

        let mut mixed = ts.to_vec();
        mixed[3].steps = 3;
        assert!(matches!(outcome_curves(&mixed), Err(Error::MixedT(2, 3))));
    }

    fn log(evals: &[(usize, f64)]) -> Vec<RunRecord> {
        evals
            .iter()
            .map(|&(i, v)| RunRecord {
                eval_reward: Some(v),
                ..RunRecord::empty(i)
            })
            .collect()
    }

    #[test]
    fn compare_examples() {
        let a = log(&[(0, 0.1), (25, 0.4), (50, 0.7)]);
        let t = compare_runs(&[("a".into(), a.clone())]).unwrap();
        assert_eq!(t.iterations, vec![0, 25, 50]);
        assert_eq!(t.column("a").unwrap(), vec![0.1, 0.4, 0.7]);
        assert_eq!(t.to_tsv(), "iteration\ta\n0\t0.1\n25\t0.4\n50\t0.7\n");

        let t2 = compare_runs(&[("a".into(), a.clone()), ("b".into(), a.clone())]).unwrap();
        assert_eq!(t2.column("a"), t2.column("b"));

        let c = log(&[(0, 0.1), (20, 0.4), (50, 0.7)]);
        assert!(matches!(compare_runs(&[("a".into(), a), ("c".into(), c)]), Err(Error::GridMismatch(_))));
    }

    fn timing(sel: f64) -> TimingRecord {
        TimingRecord {
            iteration: 0,
            rollout: 1.0,
            metric: 0.1,
            selection: sel,
            scoring: 0.5,
            update: 0.4,
        }
    }

    #[test]
    fn overhead_examples() {
        let u = vec![timing(0.2); 4];
        assert_eq!(selection_overhead(&u, &u).unwrap().ratio, 1.0);
        let a = vec![timing(0.21); 4];
        let r = selection_overhead(&a, &u).unwrap();
        assert!((r.ratio - 2.21 / 2.2).abs() < 1e-12);
        assert!(matches!(selection_overhead(&a, &[]), Err(Error::MissingTimings(_))));
        assert!(matches!(
            load_timings(Path::new("/nonexistent/timings.jsonl")),
            Err(Error::MissingTimings(_))
        ));
    }
}
