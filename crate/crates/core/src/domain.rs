//! Domain types shared across the crate.
//!
//! Everything here is validated on construction and immutable afterwards, so
//! values can be shared freely between rollout and scoring workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Tolerance on the total mass of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Fixed symbol table. `MASK` and `PAD` are not printable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    mask: TokenId,
    pad: TokenId,
    symbols: Vec<(char, TokenId)>,
}

impl Vocab {
    pub const MASK: TokenId = 0;
    pub const PAD: TokenId = 1;
    pub const SEPARATOR: char = '>';

    /// Digits, `+` and the `>` separator: 14 ids in total.
    pub fn arithmetic() -> Self {
        let mut symbols: Vec<(char, TokenId)> = ('0'..='9')
            .enumerate()
            .map(|(i, c)| (c, i as TokenId + 2))
            .collect();
        symbols.push(('+', 12));
        symbols.push((Self::SEPARATOR, 13));
        Self::new(14, Self::MASK, Self::PAD, symbols).expect("built-in vocabulary is valid")
    }

    pub fn new(
        size: usize,
        mask: TokenId,
        pad: TokenId,
        symbols: Vec<(char, TokenId)>,
    ) -> Result<Self> {
        if size < 4 {
            return Err(Error::BadShape(format!("vocabulary size {size} < 4")));
        }
        if mask == pad {
            return Err(Error::BadShape("MASK and PAD share an id".into()));
        }
        let mut seen = vec![false; size];
        for &(c, id) in &symbols {
            let idx = id as usize;
            if idx >= size || id == mask || id == pad || seen[idx] {
                return Err(Error::BadShape(format!("bad id {id} for symbol {c:?}")));
            }
            seen[idx] = true;
        }
        let mut chars: Vec<char> = symbols.iter().map(|s| s.0).collect();
        chars.sort_unstable();
        chars.dedup();
        if chars.len() != symbols.len() {
            return Err(Error::BadShape("duplicate printable symbol".into()));
        }
        Ok(Self {
            size,
            mask,
            pad,
            symbols,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> TokenId {
        self.mask
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.symbols.iter().find(|s| s.0 == c).map(|s| s.1)
    }

    pub fn symbol_of(&self, id: TokenId) -> Option<char> {
        self.symbols.iter().find(|s| s.1 == id).map(|s| s.0)
    }

    /// Text form used in dataset files and logs: PAD renders as `_`, MASK as `?`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| {
                if t == self.pad {
                    '_'
                } else if t == self.mask {
                    '?'
                } else {
                    self.symbol_of(t).unwrap_or('#')
                }
            })
            .collect()
    }

    /// Inverse of [`Vocab::render`].
    pub fn parse(&self, text: &str) -> Option<Vec<TokenId>> {
        text.chars()
            .map(|c| match c {
                '_' => Some(self.pad),
                '?' => Some(self.mask),
                c => self.id_of(c),
            })
            .collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::arithmetic()
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index and value of the most likely entry; ties go to the smaller index.
    pub fn top1(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &p) in self.0.iter().enumerate() {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }

    /// Skips validation; callers guarantee the invariants (e.g. softmax output).
    pub(crate) fn from_softmax(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
        Self(values)
    }
}

pub fn validate_prob(values: &[f64]) -> Result<ProbVector> {
    for (index, &value) in values.iter().enumerate() {
        // NaN fails this check too
        if !(value >= 0.0) {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    let sum: f64 = values.iter().sum();
    if !((sum - 1.0).abs() <= PROB_SUM_TOL) {
        return Err(Error::SumOutOfTolerance { sum });
    }
    Ok(ProbVector(values.to_vec()))
}

/// Prompt plus a completion whose slots are either committed tokens or MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    prompt: Vec<TokenId>,
    completion: Vec<TokenId>,
}

impl SequenceState {
    pub fn new(prompt: Vec<TokenId>, completion: Vec<TokenId>) -> Result<Self> {
        if prompt.contains(&Vocab::MASK) {
            return Err(Error::BadShape("prompt contains MASK".into()));
        }
        Ok(Self { prompt, completion })
    }

    pub fn fully_masked(prompt: Vec<TokenId>, completion_len: usize) -> Result<Self> {
        Self::new(prompt, vec![Vocab::MASK; completion_len])
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn completion(&self) -> &[TokenId] {
        &self.completion
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn completion_len(&self) -> usize {
        self.completion.len()
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token at absolute sequence position (prompt first).
    pub fn token_at(&self, pos: usize) -> TokenId {
        if pos < self.prompt.len() {
            self.prompt[pos]
        } else {
            self.completion[pos - self.prompt.len()]
        }
    }

    pub fn is_masked(&self, completion_pos: usize) -> bool {
        self.completion[completion_pos] == Vocab::MASK
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.completion.len())
            .filter(|&i| self.is_masked(i))
            .collect()
    }

    pub fn commit(&mut self, completion_pos: usize, token: TokenId) {
        debug_assert!(self.is_masked(completion_pos));
        debug_assert!(token != Vocab::MASK);
        self.completion[completion_pos] = token;
    }

    pub fn remask(&mut self, completion_pos: usize) {
        self.completion[completion_pos] = Vocab::MASK;
    }
}

/// Completion positions committed at step `t` (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferMask {
    pub step: usize,
    pub positions: Vec<usize>,
}

/// One denoising step of an instrumented rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: usize,
    pub masked_count: usize,
    pub transfer_positions: Vec<usize>,
    pub mean_entropy: f64,
    pub mean_inv_margin: f64,
}

/// The synchronized per-step traces of one denoising rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutTrace {
    pub prompt_id: u64,
    pub rollout_id: u64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub completion_len: usize,
    pub reward: f64,
    pub correct: bool,
    pub prompt_tokens: Vec<TokenId>,
    #[serde(rename = "steps")]
    pub records: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
}

impl RolloutTrace {
    pub fn transfer_mask(&self, t: usize) -> TransferMask {
        TransferMask {
            step: t,
            positions: self.records[t - 1].transfer_positions.clone(),
        }
    }

    /// For each completion position, the (1-based) step that committed it.
    pub fn commit_steps(&self) -> Vec<usize> {
        let mut out = vec![0; self.completion_len];
        for rec in &self.records {
            for &p in &rec.transfer_positions {
                out[p] = rec.t;
            }
        }
        out
    }

    /// Positions still masked when step `t` begins; `t = T + 1` yields the empty set.
    pub fn entering_masked(&self, t: usize) -> Vec<usize> {
        self.commit_steps()
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s >= t)
            .map(|(p, _)| p)
            .collect()
    }

    /// Final completion with every position committed at a step `>= t` re-masked.
    pub fn state_entering(&self, t: usize) -> SequenceState {
        let commit = self.commit_steps();
        let completion = self
            .final_tokens
            .iter()
            .zip(&commit)
            .map(|(&tok, &s)| if s >= t { Vocab::MASK } else { tok })
            .collect();
        SequenceState {
            prompt: self.prompt_tokens.clone(),
            completion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.steps {
            return Err(Error::BadShape(format!(
                "trace has {} step records, expected {}",
                self.records.len(),
                self.steps
            )));
        }
        if self.final_tokens.len() != self.completion_len {
            return Err(Error::BadShape("final token count differs from L".into()));
        }
        if self.final_tokens.contains(&Vocab::MASK) || self.prompt_tokens.contains(&Vocab::MASK) {
            return Err(Error::BadShape("completed trace contains MASK".into()));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::BadShape(format!("reward {} outside [0,1]", self.reward)));
        }
        let mut seen = vec![false; self.completion_len];
        let mut remaining = self.completion_len;
        for (i, rec) in self.records.iter().enumerate() {
            if rec.t != i + 1 {
                return Err(Error::BadShape(format!("step {} recorded as {}", i + 1, rec.t)));
            }
            if rec.masked_count != remaining {
                return Err(Error::BadShape(format!(
                    "step {} masked_count {} but {} positions remain",
                    rec.t, rec.masked_count, remaining
                )));
            }
            if !(rec.mean_entropy >= 0.0) || !(rec.mean_inv_margin >= 1.0) {
                return Err(Error::BadShape(format!("step {} has invalid metrics", rec.t)));
            }
            for &p in &rec.transfer_positions {
                if p >= self.completion_len || seen[p] {
                    return Err(Error::BadShape(format!("position {p} committed twice or out of range")));
                }
                seen[p] = true;
            }
            remaining -= rec.transfer_positions.len();
        }
        if remaining != 0 {
            return Err(Error::BadShape(format!("{remaining} positions never committed")));
        }
        Ok(())
    }
}

/// Batch-averaged difficulty curves indexed by step (index 0 is step 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyCurves {
    entropy: Vec<f64>,
    inv_margin: Vec<f64>,
    roec: Vec<f64>,
}

impl DifficultyCurves {
    /// Builds curves from entropy and inverse-margin series, deriving RoEC.
    pub fn from_series(entropy: Vec<f64>, inv_margin: Vec<f64>) -> Result<Self> {
        let roec = crate::metrics::roec_curve(&entropy);
        Self::with_roec(entropy, inv_margin, roec, 0.0)
    }

    /// Accepts a stored RoEC column, checking it against the entropy column.
    pub fn with_roec(
        entropy: Vec<f64>,
        inv_margin: Vec<f64>,
        roec: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        let t = entropy.len();
        if t == 0 || inv_margin.len() != t || roec.len() != t {
            return Err(Error::BadShape(format!(
                "curve lengths {} / {} / {}",
                t,
                inv_margin.len(),
                roec.len()
            )));
        }
        for v in entropy.iter().chain(&inv_margin).chain(&roec) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::BadShape(format!("curve entry {v} is not finite and >= 0")));
            }
        }
        let expected = crate::metrics::roec_curve(&entropy);
        for (i, (&found, &exp)) in roec.iter().zip(&expected).enumerate() {
            if (found - exp).abs() > tol {
                return Err(Error::RoecInconsistent {
                    step: i + 1,
                    found,
                    expected: exp,
                });
            }
        }
        Ok(Self {
            entropy,
            inv_margin,
            roec,
        })
    }

    pub fn steps(&self) -> usize {
        self.entropy.len()
    }

    pub fn entropy(&self) -> &[f64] {
        &self.entropy
    }

    pub fn inv_margin(&self) -> &[f64] {
        &self.inv_margin
    }

    pub fn roec(&self) -> &[f64] {
        &self.roec
    }
}

/// Ordered segment boundaries `0 = b_1 < ... < b_{M+1} = T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    steps: usize,
    boundaries: Vec<usize>,
}

impl SegmentPlan {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Half-open `[b_i, b_{i+1})` pairs; segment `i` covers steps `b_i + 1 ..= b_{i+1}`.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.boundaries.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Plan with one segment per step.
    pub fn unit(steps: usize) -> Self {
        Self {
            steps,
            boundaries: (0..=steps).collect(),
        }
    }
}

pub fn validate_plan(boundaries: &[usize], steps: usize, max_segments: usize) -> Result<SegmentPlan> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NotStrictlyIncreasing(boundaries.to_vec()));
    }
    if boundaries.len() < 2 || boundaries[0] != 0 || *boundaries.last().unwrap() != steps {
        return Err(Error::BadEndpoints {
            boundaries: boundaries.to_vec(),
            steps,
        });
    }
    let segments = boundaries.len() - 1;
    if segments > max_segments {
        return Err(Error::TooManySegments {
            segments,
            max: max_segments,
        });
    }
    Ok(SegmentPlan {
        steps,
        boundaries: boundaries.to_vec(),
    })
}
