//! File formats.
//!
//! * traces: JSON lines, one [`RolloutTrace`] per line, unknown fields rejected
//! * curves: CSV with header `step,mean_entropy,mean_inv_margin,roec`
//! * run logs and timings: JSON lines, appended one complete record at a time
//! * checkpoints: little-endian binary, see [`write_checkpoint`]
//! * datasets: `task<TAB>prompt<TAB>gold`, PAD rendered as `_`
//!
//! Floats are written in shortest round-trip form (at most 17 significant
//! digits), so every text round-trip is bit-exact.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{DifficultyCurves, RolloutTrace, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tasks::{TaskInstance, TaskKind};

pub const CURVES_HEADER: &str = "step,mean_entropy,mean_inv_margin,roec";
pub const CURVES_ROEC_TOL: f64 = 1e-9;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATPOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// traces

pub fn write_traces(path: &Path, traces: &[RolloutTrace]) -> Result<()> {
    let mut out = create(path)?;
    for trace in traces {
        let line = serde_json::to_string(trace).expect("trace serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<RolloutTrace>> {
    let text = read_text(path)?;
    let mut traces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let trace: RolloutTrace =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        trace
            .validate()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        traces.push(trace);
    }
    Ok(traces)
}

// ---------------------------------------------------------------------------
// curves

pub fn write_curves(path: &Path, curves: &DifficultyCurves) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{CURVES_HEADER}").map_err(io)?;
    for t in 0..curves.steps() {
        writeln!(
            out,
            "{},{:e},{:e},{:e}",
            t + 1,
            curves.entropy()[t],
            curves.inv_margin()[t],
            curves.roec()[t]
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_curves(path: &Path) -> Result<DifficultyCurves> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVES_HEADER => {}
        _ => return Err(Error::parse(path, 1, format!("expected header {CURVES_HEADER:?}"))),
    }
    let (mut h, mut cm, mut roec) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 4 {
            return Err(Error::parse(path, i + 1, format!("expected 4 columns, got {}", cells.len())));
        }
        let step: usize = cells[0]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad step {:?}", cells[0])))?;
        if step != h.len() + 1 {
            return Err(Error::parse(path, i + 1, format!("expected step {}, got {step}", h.len() + 1)));
        }
        let mut nums = [0.0; 3];
        for (k, cell) in cells[1..].iter().enumerate() {
            nums[k] = cell
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad number {cell:?}")))?;
        }
        h.push(nums[0]);
        cm.push(nums[1]);
        roec.push(nums[2]);
    }
    if h.is_empty() {
        return Err(Error::parse(path, 2, "no data rows"));
    }
    DifficultyCurves::with_roec(h, cm, roec, CURVES_ROEC_TOL).map_err(|e| match e {
        Error::BadShape(msg) => Error::parse(path, 0, msg),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// run logs

/// One line of `run_log.jsonl`. Training fields are absent on the final
/// evaluation-only record; evaluation fields are present only on evaluated
/// iterations. Contains nothing time-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_mean_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_mean_inv_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_max_roec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_exact: Option<f64>,
}

impl RunRecord {
    pub fn empty(iteration: usize) -> Self {
        Self {
            iteration,
            mean_reward: None,
            loss: None,
            mean_kl: None,
            grad_norm: None,
            boundaries: None,
            curve_mean_entropy: None,
            curve_mean_inv_margin: None,
            curve_max_roec: None,
            eval_reward: None,
            eval_exact: None,
        }
    }
}

/// Wall-clock seconds per phase of one training iteration (`timings.jsonl`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingRecord {
    pub iteration: usize,
    pub rollout: f64,
    pub metric: f64,
    pub selection: f64,
    pub scoring: f64,
    pub update: f64,
}

impl TimingRecord {
    pub fn total(&self) -> f64 {
        self.rollout + self.metric + self.selection + self.scoring + self.update
    }
}

/// Appends one JSON record per line, flushing after each.
pub struct JsonlWriter<T> {
    path: PathBuf,
    file: File,
    _marker: PhantomData<T>,
}

impl<T: Serialize> JsonlWriter<T> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            _marker: PhantomData,
        })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            _marker: PhantomData,
        })
    }

    pub fn append(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsonlLog<T> {
    pub records: Vec<T>,
    /// The file ended in an unterminated, unparseable line (a crashed writer).
    pub torn_tail: bool,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlLog<T>> {
    let text = read_text(path)?;
    let terminated = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    let mut torn_tail = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() && !terminated => torn_tail = true,
            Err(e) => return Err(Error::parse(path, i + 1, e.to_string())),
        }
    }
    Ok(JsonlLog { records, torn_tail })
}

pub fn read_run_log(path: &Path) -> Result<JsonlLog<RunRecord>> {
    read_jsonl(path)
}

pub fn read_timings(path: &Path) -> Result<JsonlLog<TimingRecord>> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: ModelParams,
}

/// Layout, all little-endian:
///
/// ```text
/// magic    8 bytes  "ATPOCKPT"
/// version  u32      1
/// V P L d  4 x u32
/// seed     u64
/// count    u64      number of parameters
/// values   count x f32, tensors in `model::Tensor::ALL` order, row-major
/// ```
pub fn write_checkpoint(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    let dims = params.dims();
    let mut buf = Vec::with_capacity(48 + 4 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [dims.vocab, dims.prompt_len, dims.completion_len, dims.d_model] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &v in params.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, 0, msg.to_string());
    if bytes.len() < 44 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(8) != CHECKPOINT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let dims = ModelDims {
        vocab: u32_at(12) as usize,
        prompt_len: u32_at(16) as usize,
        completion_len: u32_at(20) as usize,
        d_model: u32_at(24) as usize,
    };
    dims.validate().map_err(|e| bad(&e.to_string()))?;
    let seed = u64_at(28);
    let count = u64_at(36) as usize;
    if count != dims.param_count() || bytes.len() != 44 + 4 * count {
        return Err(bad("parameter count does not match header"));
    }
    let values = bytes[44..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Checkpoint {
        seed,
        params: ModelParams::from_flat(dims, values)?,
    })
}

// ---------------------------------------------------------------------------
// datasets

pub fn write_dataset(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let vocab = Vocab::arithmetic();
    let mut out = create(path)?;
    for inst in instances {
        writeln!(
            out,
            "{}\t{}\t{}",
            inst.task,
            vocab.render(&inst.prompt),
            vocab.render(&inst.gold)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>> {
    let vocab = Vocab::arithmetic();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let parsed = (cols.len() == 3)
            .then(|| {
                Some((
                    cols[0].parse::<TaskKind>().ok()?,
                    vocab.parse(cols[1])?,
                    vocab.parse(cols[2])?,
                ))
            })
            .flatten();
        let (task, prompt, gold) =
            parsed.ok_or_else(|| Error::parse(path, i + 1, "expected task<TAB>prompt<TAB>gold"))?;
        out.push(TaskInstance {
            task,
            index: i as u64,
            prompt,
            gold,
        });
    }
    Ok(out)
}
