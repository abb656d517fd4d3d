//! A one-block bidirectional transformer denoiser with hand-written backward
//! passes.
//!
//! Layout of a forward pass over a sequence of `S = P + L` tokens:
//!
//! ```text
//! x0 = tok_emb[token] + pos_emb[position]
//! x1 = x0 + attn(ln1(x0))            single head, no attention mask
//! x2 = x1 + W2 tanh(W1 ln2(x1) + b1) + b2
//! logits = head(lnf(x2)) + head_bias
//! ```
//!
//! The MASK id is never a valid prediction: its logit is pinned to `-inf`,
//! so every predictive distribution lives on the remaining `V - 1` ids.
//!
//! Since there is a single block, only the key/value path needs every row.
//! Queries, the feed-forward block and the head are evaluated only for the
//! rows that are actually scored.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ProbVector, SequenceState, TokenId, Vocab};
use crate::error::{Error, Result};

pub const INIT_SCALE: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const INIT_STREAM: u64 = 0x7061_7261_6d73; // "params"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub prompt_len: usize,
    pub completion_len: usize,
    pub d_model: usize,
}

impl ModelDims {
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.completion_len
    }

    pub fn hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.d_model == 0 || self.completion_len == 0 {
            return Err(Error::BadShape(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Tensor::ALL.iter().map(|t| t.len(self)).sum()
    }
}

/// Parameter tensors in checkpoint order. Matrices are row-major `[in][out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    TokEmb,
    PosEmb,
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    AttnOut,
    Ln2Gain,
    Ln2Bias,
    FfIn,
    FfInBias,
    FfOut,
    FfOutBias,
    LnfGain,
    LnfBias,
    Head,
    HeadBias,
}

impl Tensor {
    pub const ALL: [Tensor; 18] = [
        Tensor::TokEmb,
        Tensor::PosEmb,
        Tensor::Ln1Gain,
        Tensor::Ln1Bias,
        Tensor::Query,
        Tensor::Key,
        Tensor::Value,
        Tensor::AttnOut,
        Tensor::Ln2Gain,
        Tensor::Ln2Bias,
        Tensor::FfIn,
        Tensor::FfInBias,
        Tensor::FfOut,
        Tensor::FfOutBias,
        Tensor::LnfGain,
        Tensor::LnfBias,
        Tensor::Head,
        Tensor::HeadBias,
    ];

    pub fn shape(&self, dims: &ModelDims) -> (usize, usize) {
        let d = dims.d_model;
        let h = dims.hidden();
        match self {
            Tensor::TokEmb => (dims.vocab, d),
            Tensor::PosEmb => (dims.seq_len(), d),
            Tensor::Query | Tensor::Key | Tensor::Value | Tensor::AttnOut => (d, d),
            Tensor::FfIn => (d, h),
            Tensor::FfInBias => (1, h),
            Tensor::FfOut => (h, d),
            Tensor::Head => (d, dims.vocab),
            Tensor::HeadBias => (1, dims.vocab),
            Tensor::Ln1Gain
            | Tensor::Ln1Bias
            | Tensor::Ln2Gain
            | Tensor::Ln2Bias
            | Tensor::FfOutBias
            | Tensor::LnfGain
            | Tensor::LnfBias => (1, d),
        }
    }

    pub fn len(&self, dims: &ModelDims) -> usize {
        let (r, c) = self.shape(dims);
        r * c
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

/// All parameters in one flat buffer. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    offsets: [usize; 19],
    data: Vec<f64>,
}

pub type Gradient = ModelParams;

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let mut offsets = [0usize; 19];
        for (i, t) in Tensor::ALL.iter().enumerate() {
            offsets[i + 1] = offsets[i] + t.len(&dims);
        }
        Self {
            dims,
            offsets,
            data: vec![0.0; offsets[18]],
        }
    }

    pub fn from_flat(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims);
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch {
                expected: p.data.len(),
                actual: data.len(),
            });
        }
        p.data = data;
        Ok(p)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        let i = t.index();
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let i = t.index();
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Flat index range of a tensor.
    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t.index();
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, in index order.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Deterministic initialization: weight matrices and embeddings from
/// `N(0, 0.02^2)`, layer-norm gains 1, biases 0.
pub fn init_params(seed: u64, dims: ModelDims) -> ModelParams {
    init_params_scaled(seed, dims, INIT_SCALE)
}

/// Like [`init_params`] with a custom standard deviation for the random tensors.
pub fn init_params_scaled(seed: u64, dims: ModelDims, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for t in Tensor::ALL {
        let slice = p.tensor_mut(t);
        match t {
            Tensor::Ln1Gain | Tensor::Ln2Gain | Tensor::LnfGain => slice.fill(1.0),
            Tensor::Ln1Bias
            | Tensor::Ln2Bias
            | Tensor::LnfBias
            | Tensor::FfInBias
            | Tensor::FfOutBias
            | Tensor::HeadBias => {}
            _ => slice.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotLabel {
    Current,
    Old,
    Ref,
}

/// Frozen, shareable copy of the parameters.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    label: SnapshotLabel,
    params: Arc<ModelParams>,
}

impl ParamSnapshot {
    pub fn new(label: SnapshotLabel, params: &ModelParams) -> Self {
        Self {
            label,
            params: Arc::new(params.clone()),
        }
    }

    pub fn label(&self) -> SnapshotLabel {
        self.label
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Same frozen parameters under another label, without copying.
    pub fn relabeled(&self, label: SnapshotLabel) -> Self {
        Self {
            label,
            params: Arc::clone(&self.params),
        }
    }

    pub fn shares_params(&self, other: &ParamSnapshot) -> bool {
        Arc::ptr_eq(&self.params, &other.params)
    }
}

// ---------------------------------------------------------------------------
// dense helpers, row-major

/// `x[rows x inp] * w[inp x out]`
fn matmul(x: &[f64], rows: usize, inp: usize, w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let yr = &mut y[r * out..(r + 1) * out];
        for (i, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yo, &wv) in yr.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yo += xv * wv;
            }
        }
    }
    y
}

/// `dw += x^T dy`
fn acc_weight_grad(dw: &mut [f64], x: &[f64], dy: &[f64], rows: usize, inp: usize, out: usize) {
    for r in 0..rows {
        let dyr = &dy[r * out..(r + 1) * out];
        for (i, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &d) in dw[i * out..(i + 1) * out].iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
    }
}

/// `dx = dy w^T`
fn matmul_t(dy: &[f64], rows: usize, inp: usize, w: &[f64], out: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inp];
    for r in 0..rows {
        let dyr = &dy[r * out..(r + 1) * out];
        for i in 0..inp {
            dx[r * inp + i] = dyr.iter().zip(&w[i * out..(i + 1) * out]).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

fn acc_bias_grad(db: &mut [f64], dy: &[f64], rows: usize, out: usize) {
    for r in 0..rows {
        for (g, &d) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *g += d;
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Numerically stable log-softmax; `-inf` entries stay `-inf`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

// ---------------------------------------------------------------------------
// forward / backward

struct Pass {
    tokens: Vec<TokenId>,
    /// absolute sequence positions evaluated past the key/value path
    rows: Vec<usize>,
    ln1: LnCache,
    h1: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    queries: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    act: Vec<f64>,
    lnf: LnCache,
    h3: Vec<f64>,
    logits: Vec<f64>,
}

fn check_state(params: &ModelParams, state: &SequenceState) -> Result<()> {
    let dims = params.dims();
    if state.prompt_len() != dims.prompt_len || state.completion_len() != dims.completion_len {
        return Err(Error::BadShape(format!(
            "state is {}+{} tokens, model expects {}+{}",
            state.prompt_len(),
            state.completion_len(),
            dims.prompt_len,
            dims.completion_len
        )));
    }
    let n = state.len();
    if (0..n).any(|i| state.token_at(i) as usize >= dims.vocab) {
        return Err(Error::BadShape("token id out of vocabulary".into()));
    }
    Ok(())
}

fn run(params: &ModelParams, state: &SequenceState, rows: Vec<usize>) -> Pass {
    let dims = params.dims();
    let d = dims.d_model;
    let h = dims.hidden();
    let vsz = dims.vocab;
    let n = state.len();
    let m = rows.len();
    let tokens: Vec<TokenId> = (0..n).map(|i| state.token_at(i)).collect();

    let tok = params.tensor(Tensor::TokEmb);
    let pos = params.tensor(Tensor::PosEmb);
    let mut x0 = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            x0[i * d + j] = tok[t * d + j] + pos[i * d + j];
        }
    }

    let (h1, ln1) = layer_norm(&x0, n, d, params.tensor(Tensor::Ln1Gain), params.tensor(Tensor::Ln1Bias));
    let keys = matmul(&h1, n, d, params.tensor(Tensor::Key), d);
    let values = matmul(&h1, n, d, params.tensor(Tensor::Value), d);
    let h1_rows: Vec<f64> = rows.iter().flat_map(|&r| h1[r * d..(r + 1) * d].iter().copied()).collect();
    let queries = matmul(&h1_rows, m, d, params.tensor(Tensor::Query), d);

    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; m * n];
    for i in 0..m {
        let q = &queries[i * d..(i + 1) * d];
        let scores: Vec<f64> = (0..n)
            .map(|j| q.iter().zip(&keys[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        attn[i * n..(i + 1) * n].copy_from_slice(&softmax(&scores));
    }
    let ctx = matmul(&attn, m, n, &values, d);
    let proj = matmul(&ctx, m, d, params.tensor(Tensor::AttnOut), d);
    let mut x1 = vec![0.0; m * d];
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..d {
            x1[i * d + j] = x0[r * d + j] + proj[i * d + j];
        }
    }

    let (h2, ln2) = layer_norm(&x1, m, d, params.tensor(Tensor::Ln2Gain), params.tensor(Tensor::Ln2Bias));
    let mut act = matmul(&h2, m, d, params.tensor(Tensor::FfIn), h);
    let b1 = params.tensor(Tensor::FfInBias);
    for i in 0..m {
        for j in 0..h {
            act[i * h + j] = (act[i * h + j] + b1[j]).tanh();
        }
    }
    let ff = matmul(&act, m, h, params.tensor(Tensor::FfOut), d);
    let b2 = params.tensor(Tensor::FfOutBias);
    let mut x2 = x1;
    for i in 0..m {
        for j in 0..d {
            x2[i * d + j] += ff[i * d + j] + b2[j];
        }
    }

    let (h3, lnf) = layer_norm(&x2, m, d, params.tensor(Tensor::LnfGain), params.tensor(Tensor::LnfBias));
    let mut logits = matmul(&h3, m, d, params.tensor(Tensor::Head), vsz);
    let hb = params.tensor(Tensor::HeadBias);
    for i in 0..m {
        for v in 0..vsz {
            logits[i * vsz + v] += hb[v];
        }
        logits[i * vsz + Vocab::MASK as usize] = f64::NEG_INFINITY;
    }

    Pass {
        tokens,
        rows,
        ln1,
        h1,
        keys,
        values,
        queries,
        attn,
        ctx,
        ln2,
        h2,
        act,
        lnf,
        h3,
        logits,
    }
}

/// Accumulates into `grad` the gradient implied by `dlogits` (one row per pass row).
fn backward(params: &ModelParams, pass: &Pass, dlogits: &[f64], grad: &mut Gradient) {
    let dims = *params.dims();
    let d = dims.d_model;
    let h = dims.hidden();
    let vsz = dims.vocab;
    let n = pass.tokens.len();
    let m = pass.rows.len();

    acc_weight_grad(grad.tensor_mut(Tensor::Head), &pass.h3, dlogits, m, d, vsz);
    acc_bias_grad(grad.tensor_mut(Tensor::HeadBias), dlogits, m, vsz);
    let dh3 = matmul_t(dlogits, m, d, params.tensor(Tensor::Head), vsz);

    let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
    let dx2 = layer_norm_back(&dh3, &pass.lnf, m, d, params.tensor(Tensor::LnfGain), &mut dg, &mut db);
    add_into(grad.tensor_mut(Tensor::LnfGain), &dg);
    add_into(grad.tensor_mut(Tensor::LnfBias), &db);

    // feed-forward branch
    acc_weight_grad(grad.tensor_mut(Tensor::FfOut), &pass.act, &dx2, m, h, d);
    acc_bias_grad(grad.tensor_mut(Tensor::FfOutBias), &dx2, m, d);
    let mut dpre = matmul_t(&dx2, m, h, params.tensor(Tensor::FfOut), d);
    for (g, &a) in dpre.iter_mut().zip(&pass.act) {
        *g *= 1.0 - a * a;
    }
    acc_weight_grad(grad.tensor_mut(Tensor::FfIn), &pass.h2, &dpre, m, d, h);
    acc_bias_grad(grad.tensor_mut(Tensor::FfInBias), &dpre, m, h);
    let dh2 = matmul_t(&dpre, m, d, params.tensor(Tensor::FfIn), h);
    let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
    let mut dx1 = layer_norm_back(&dh2, &pass.ln2, m, d, params.tensor(Tensor::Ln2Gain), &mut dg, &mut db);
    add_into(grad.tensor_mut(Tensor::Ln2Gain), &dg);
    add_into(grad.tensor_mut(Tensor::Ln2Bias), &db);
    add_into(&mut dx1, &dx2);

    // attention branch
    acc_weight_grad(grad.tensor_mut(Tensor::AttnOut), &pass.ctx, &dx1, m, d, d);
    let dctx = matmul_t(&dx1, m, d, params.tensor(Tensor::AttnOut), d);
    let mut dvalues = vec![0.0; n * d];
    acc_weight_grad(&mut dvalues, &pass.attn, &dctx, m, n, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dscores = vec![0.0; m * n];
    for i in 0..m {
        let a = &pass.attn[i * n..(i + 1) * n];
        let dc = &dctx[i * d..(i + 1) * d];
        let da: Vec<f64> = (0..n)
            .map(|j| dc.iter().zip(&pass.values[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum())
            .collect();
        let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for j in 0..n {
            dscores[i * n + j] = a[j] * (da[j] - dot) * scale;
        }
    }
    let dqueries = matmul(&dscores, m, n, &pass.keys, d);
    let mut dkeys = vec![0.0; n * d];
    acc_weight_grad(&mut dkeys, &dscores, &pass.queries, m, n, d);

    let h1_rows: Vec<f64> = pass
        .rows
        .iter()
        .flat_map(|&r| pass.h1[r * d..(r + 1) * d].iter().copied())
        .collect();
    acc_weight_grad(grad.tensor_mut(Tensor::Query), &h1_rows, &dqueries, m, d, d);
    acc_weight_grad(grad.tensor_mut(Tensor::Key), &pass.h1, &dkeys, n, d, d);
    acc_weight_grad(grad.tensor_mut(Tensor::Value), &pass.h1, &dvalues, n, d, d);

    let mut dh1 = matmul_t(&dkeys, n, d, params.tensor(Tensor::Key), d);
    add_into(&mut dh1, &matmul_t(&dvalues, n, d, params.tensor(Tensor::Value), d));
    let dq_in = matmul_t(&dqueries, m, d, params.tensor(Tensor::Query), d);
    for (i, &r) in pass.rows.iter().enumerate() {
        add_into(&mut dh1[r * d..(r + 1) * d], &dq_in[i * d..(i + 1) * d]);
    }
    let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
    let mut dx0 = layer_norm_back(&dh1, &pass.ln1, n, d, params.tensor(Tensor::Ln1Gain), &mut dg, &mut db);
    add_into(grad.tensor_mut(Tensor::Ln1Gain), &dg);
    add_into(grad.tensor_mut(Tensor::Ln1Bias), &db);
    for (i, &r) in pass.rows.iter().enumerate() {
        add_into(&mut dx0[r * d..(r + 1) * d], &dx1[i * d..(i + 1) * d]);
    }

    let tok = grad.range(Tensor::TokEmb).start;
    let pos = grad.range(Tensor::PosEmb).start;
    let g = grad.as_mut_slice();
    for (i, &t) in pass.tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            g[tok + t * d + j] += dx0[i * d + j];
            g[pos + i * d + j] += dx0[i * d + j];
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Logits for every position, `(P + L)` rows of `V` entries.
pub fn forward_logits(params: &ModelParams, state: &SequenceState) -> Result<Vec<Vec<f64>>> {
    check_state(params, state)?;
    let vsz = params.dims().vocab;
    let pass = run(params, state, (0..state.len()).collect());
    Ok(pass.logits.chunks(vsz).map(|c| c.to_vec()).collect())
}

/// Logits at the given completion positions only.
pub fn completion_logits(
    params: &ModelParams,
    state: &SequenceState,
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_state(params, state)?;
    let vsz = params.dims().vocab;
    let p = state.prompt_len();
    let pass = run(params, state, positions.iter().map(|&c| p + c).collect());
    Ok(pass.logits.chunks(vsz).map(|c| c.to_vec()).collect())
}

/// Predictive distributions at the given completion positions.
pub fn completion_distributions(
    params: &ModelParams,
    state: &SequenceState,
    positions: &[usize],
) -> Result<Vec<ProbVector>> {
    distributions(&completion_logits(params, state, positions)?)
}

/// Softmax of each logit row; fails if a row does not normalize.
pub fn distributions(logits: &[Vec<f64>]) -> Result<Vec<ProbVector>> {
    logits
        .iter()
        .map(|row| {
            let p = softmax(row);
            let sum: f64 = p.iter().sum();
            if p.iter().all(|v| v.is_finite()) && (sum - 1.0).abs() <= crate::domain::PROB_SUM_TOL {
                Ok(ProbVector::from_softmax(p))
            } else {
                Err(Error::NonFiniteOutput)
            }
        })
        .collect()
}

fn check_masked(state: &SequenceState, positions: &[usize]) -> Result<()> {
    for &c in positions {
        if c >= state.completion_len() || !state.is_masked(c) {
            return Err(Error::PositionNotMasked(c));
        }
    }
    Ok(())
}

/// `log softmax(logits[pos])[target]` for each requested masked completion position.
pub fn log_probs_at(
    params: &ModelParams,
    state: &SequenceState,
    positions: &[usize],
    targets: &[TokenId],
) -> Result<Vec<f64>> {
    if positions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: positions.len(),
            actual: targets.len(),
        });
    }
    check_masked(state, positions)?;
    let logits = completion_logits(params, state, positions)?;
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| log_softmax(row)[t as usize])
        .collect())
}

/// Per-token objective as a function of the token's log-probability.
pub trait TokenLoss {
    /// Returns the loss value and its derivative with respect to `logp`.
    fn eval(&self, logp: f64) -> (f64, f64);
}

/// `-logp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegLogLik;

impl TokenLoss for NegLogLik {
    fn eval(&self, logp: f64) -> (f64, f64) {
        (-logp, -1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTerm<L> {
    pub position: usize,
    pub target: TokenId,
    pub weight: f64,
    pub loss: L,
}

/// All terms that share one input state (one forward pass).
#[derive(Debug, Clone, PartialEq)]
pub struct StateObjective<L> {
    pub state: SequenceState,
    pub terms: Vec<TokenTerm<L>>,
}

/// `loss = sum(weight * loss(logp))` and its gradient with respect to every parameter.
pub fn loss_and_grad<L: TokenLoss>(
    params: &ModelParams,
    objectives: &[StateObjective<L>],
) -> Result<(f64, Gradient)> {
    let mut grad = ModelParams::zeros(*params.dims());
    let vsz = params.dims().vocab;
    let mut total = 0.0;
    for obj in objectives {
        check_state(params, &obj.state)?;
        let terms: Vec<&TokenTerm<L>> = obj.terms.iter().filter(|t| t.weight != 0.0).collect();
        let positions: Vec<usize> = terms.iter().map(|t| t.position).collect();
        check_masked(&obj.state, &positions)?;
        if terms.is_empty() {
            continue;
        }
        let p = obj.state.prompt_len();
        let pass = run(params, &obj.state, positions.iter().map(|&c| p + c).collect());
        let mut dlogits = vec![0.0; terms.len() * vsz];
        for (i, term) in terms.iter().enumerate() {
            let row = &pass.logits[i * vsz..(i + 1) * vsz];
            let logp = log_softmax(row);
            let (value, slope) = term.loss.eval(logp[term.target as usize]);
            total += term.weight * value;
            // d logp[target] / d logit[v] = 1[v == target] - softmax[v]
            let coeff = term.weight * slope;
            let dl = &mut dlogits[i * vsz..(i + 1) * vsz];
            for (v, g) in dl.iter_mut().enumerate() {
                *g -= coeff * logp[v].exp();
            }
            dl[term.target as usize] += coeff;
        }
        backward(params, &pass, &dlogits, &mut grad);
    }
    Ok((total, grad))
}
