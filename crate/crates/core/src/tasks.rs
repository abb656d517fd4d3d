//! Synthetic verifiable tasks: copy, sort and two-digit addition.
//!
//! Prompts are laid out as `symbols > PAD...` over `P` slots; gold
//! completions are the answer followed by PAD up to `L`. Instances are keyed
//! by index, so the train and eval splits are disjoint index ranges.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// First index of the held-out split.
pub const EVAL_OFFSET: u64 = 1 << 40;

const DIGITS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Sort,
    Sum,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Sort => "sort",
            TaskKind::Sum => "sum",
        }
    }

    /// Symbols shown before the separator.
    pub fn prompt_symbols(&self) -> usize {
        match self {
            TaskKind::Copy | TaskKind::Sort => DIGITS,
            TaskKind::Sum => 5,
        }
    }

    /// Non-PAD length of the gold completion.
    pub fn answer_len(&self) -> usize {
        match self {
            TaskKind::Copy | TaskKind::Sort => DIGITS,
            TaskKind::Sum => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "sort" => Ok(TaskKind::Sort),
            "sum" => Ok(TaskKind::Sum),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub index: u64,
    pub prompt: Vec<TokenId>,
    pub gold: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskShape {
    pub prompt_len: usize,
    pub completion_len: usize,
}

fn check_shape(task: TaskKind, shape: TaskShape) -> Result<()> {
    if shape.completion_len < task.answer_len() {
        return Err(Error::LTooSmall {
            task: task.to_string(),
            length: shape.completion_len,
            needed: task.answer_len(),
        });
    }
    if shape.prompt_len < task.prompt_symbols() + 1 {
        return Err(Error::BadShape(format!(
            "prompt length {} too small for task {task} (needs {})",
            shape.prompt_len,
            task.prompt_symbols() + 1
        )));
    }
    Ok(())
}

fn digit(vocab: &Vocab, d: u32) -> TokenId {
    vocab
        .id_of(char::from_digit(d, 10).expect("single digit"))
        .expect("digits are in the vocabulary")
}

fn pad_to(mut tokens: Vec<TokenId>, len: usize) -> Vec<TokenId> {
    tokens.resize(len, Vocab::PAD);
    tokens
}

/// The instance at `index`, a pure function of `(task, index, shape, seed)`.
pub fn instance_at(task: TaskKind, index: u64, shape: TaskShape, seed: u64) -> Result<TaskInstance> {
    check_shape(task, shape)?;
    let vocab = Vocab::arithmetic();
    let mut rng = rng::keyed(seed, Domain::Task, &[task as u64, index]);
    let sep = vocab.id_of(Vocab::SEPARATOR).expect("separator");
    let (mut prompt, answer) = match task {
        TaskKind::Copy | TaskKind::Sort => {
            let digits: Vec<u32> = (0..DIGITS).map(|_| rng.gen_range(0..10)).collect();
            let mut answer = digits.clone();
            if task == TaskKind::Sort {
                answer.sort_unstable();
            }
            (
                digits.iter().map(|&d| digit(&vocab, d)).collect::<Vec<_>>(),
                answer.iter().map(|&d| digit(&vocab, d)).collect::<Vec<_>>(),
            )
        }
        TaskKind::Sum => {
            let a: u32 = rng.gen_range(10..100);
            let b: u32 = rng.gen_range(10..100);
            let text = format!("{a:02}+{b:02}");
            let answer = format!("{:03}", a + b);
            (
                vocab.parse(&text).expect("arithmetic symbols"),
                vocab.parse(&answer).expect("digits"),
            )
        }
    };
    prompt.push(sep);
    Ok(TaskInstance {
        task,
        index,
        prompt: pad_to(prompt, shape.prompt_len),
        gold: pad_to(answer, shape.completion_len),
    })
}

/// `count` instances at indices `start..start + count`.
pub fn generate_range(
    task: TaskKind,
    start: u64,
    count: usize,
    shape: TaskShape,
    seed: u64,
) -> Result<Vec<TaskInstance>> {
    (0..count as u64)
        .map(|i| instance_at(task, start + i, shape, seed))
        .collect()
}

/// Training-split instances `0..count`.
pub fn generate(task: TaskKind, count: usize, shape: TaskShape, seed: u64) -> Result<Vec<TaskInstance>> {
    generate_range(task, 0, count, shape, seed)
}

fn scored_positions(instance: &TaskInstance) -> impl Iterator<Item = usize> + '_ {
    instance
        .gold
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != Vocab::PAD)
        .map(|(i, _)| i)
}

/// `0.5 * matched_fraction + 0.5 * exact`, over non-PAD gold positions.
pub fn reward(instance: &TaskInstance, completion: &[TokenId]) -> f64 {
    let total = scored_positions(instance).count();
    if total == 0 {
        return 1.0;
    }
    let hits = scored_positions(instance)
        .filter(|&i| completion.get(i) == Some(&instance.gold[i]))
        .count();
    let exact = if hits == total { 1.0 } else { 0.0 };
    0.5 * hits as f64 / total as f64 + 0.5 * exact
}

pub fn is_correct(instance: &TaskInstance, completion: &[TokenId]) -> bool {
    scored_positions(instance).all(|i| completion.get(i) == Some(&instance.gold[i]))
}
