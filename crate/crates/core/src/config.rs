//! Training configuration, read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_MARGIN_EPS;
use crate::model::ModelDims;
use crate::rl::{AdamConfig, ObjectiveConfig};
use crate::sampler::{DecodeMode, DecodeSpec};
use crate::selection::{SelectionPolicy, StepSelector};
use crate::tasks::{TaskKind, TaskShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// Only `"arithmetic"` (14 ids) is defined.
    pub vocab: String,
    /// Denoising steps `T`.
    pub steps: usize,
    /// Target segment count `N`.
    pub segments: usize,
    pub completion_len: usize,
    pub prompt_len: usize,
    pub d_model: usize,
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub clip_norm: f64,
    pub adv_eps: f64,
    pub margin_eps: f64,
    pub policy: SelectionPolicy,
    /// `k` in the RoEC threshold `mu + k * sigma`.
    pub sigma_multiplier: f64,
    pub temperature: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_count: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            vocab: "arithmetic".into(),
            steps: 16,
            segments: 4,
            completion_len: 16,
            prompt_len: 8,
            d_model: 32,
            group_size: 6,
            prompts_per_batch: 8,
            iterations: 300,
            learning_rate: 1e-3,
            clip_eps: 0.2,
            kl_beta: 0.01,
            clip_norm: 0.2,
            adv_eps: 1e-8,
            margin_eps: DEFAULT_MARGIN_EPS,
            policy: SelectionPolicy::Hybrid,
            sigma_multiplier: 1.0,
            temperature: 1.0,
            seed: 0,
            eval_every: 25,
            eval_count: 256,
            checkpoint_every: 100,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab != "arithmetic" {
            return bad(format!("unknown vocab {:?}", self.vocab));
        }
        if !(1 <= self.segments && self.segments <= self.steps && self.steps <= self.completion_len) {
            return bad(format!(
                "need 1 <= N <= T <= L, got N={} T={} L={}",
                self.segments, self.steps, self.completion_len
            ));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.prompts_per_batch == 0 || self.d_model == 0 || self.eval_count == 0 {
            return bad("prompts_per_batch, d_model and eval_count must be positive".into());
        }
        if self.prompt_len < self.task.prompt_symbols() + 1 {
            return bad(format!(
                "prompt_len {} too small for task {}",
                self.prompt_len, self.task
            ));
        }
        if self.completion_len < self.task.answer_len() {
            return bad(format!(
                "completion_len {} too small for task {}",
                self.completion_len, self.task
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)".into());
        }
        if !(self.kl_beta >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("kl_beta must be >= 0 and clip_norm > 0".into());
        }
        if !(self.adv_eps > 0.0 && self.margin_eps > 0.0 && self.temperature > 0.0) {
            return bad("adv_eps, margin_eps and temperature must be > 0".into());
        }
        if !(self.sigma_multiplier >= 0.0) {
            return bad("sigma_multiplier must be >= 0".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: 14,
            prompt_len: self.prompt_len,
            completion_len: self.completion_len,
            d_model: self.d_model,
        }
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape {
            prompt_len: self.prompt_len,
            completion_len: self.completion_len,
        }
    }

    pub fn sampling(&self) -> DecodeSpec {
        DecodeSpec {
            steps: self.steps,
            completion_len: self.completion_len,
            temperature: self.temperature,
            mode: DecodeMode::Sample,
            seed: self.seed,
            margin_eps: self.margin_eps,
        }
    }

    pub fn greedy(&self) -> DecodeSpec {
        DecodeSpec {
            mode: DecodeMode::Greedy,
            ..self.sampling()
        }
    }

    pub fn selector(&self) -> StepSelector {
        StepSelector {
            policy: self.policy,
            sigma_multiplier: self.sigma_multiplier,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
        }
    }
}
