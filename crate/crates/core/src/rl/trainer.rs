use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::domain::{DifficultyCurves, RolloutTrace, SegmentPlan};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, init_params, Gradient, ModelParams, ParamSnapshot, SnapshotLabel};
use crate::sampler::{self, DecodeSpec};
use crate::tasks::{self, TaskInstance, TaskKind, TaskShape, EVAL_OFFSET};
use crate::trace_io::{self, JsonlWriter, RunRecord, TimingRecord};

use super::{adam_step, group_advantages, trajectory_loss, OptimizerState, Snapshots};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub count: usize,
    pub mean_reward: f64,
    pub exact_match: f64,
}

impl EvalStats {
    pub fn from_traces(traces: &[RolloutTrace]) -> Self {
        let n = traces.len().max(1) as f64;
        Self {
            count: traces.len(),
            mean_reward: traces.iter().map(|t| t.reward).sum::<f64>() / n,
            exact_match: traces.iter().filter(|t| t.correct).count() as f64 / n,
        }
    }
}

fn score_trace(trace: &mut RolloutTrace, instance: &TaskInstance) {
    trace.reward = tasks::reward(instance, &trace.final_tokens);
    trace.correct = tasks::is_correct(instance, &trace.final_tokens);
}

/// Greedy rollouts on held-out instances `EVAL_OFFSET..EVAL_OFFSET + count`,
/// scored by the task. Runs on the caller's rayon pool.
pub fn eval_traces(
    params: &ModelParams,
    task: TaskKind,
    count: usize,
    spec: &DecodeSpec,
    seed: u64,
) -> Result<Vec<RolloutTrace>> {
    let shape = TaskShape {
        prompt_len: params.dims().prompt_len,
        completion_len: spec.completion_len,
    };
    let instances = tasks::generate_range(task, EVAL_OFFSET, count, shape, seed)?;
    let snapshot = ParamSnapshot::new(SnapshotLabel::Current, params);
    instances
        .par_iter()
        .map(|inst| {
            let mut trace = sampler::rollout(&snapshot, inst.index, 0, &inst.prompt, spec)?;
            score_trace(&mut trace, inst);
            Ok(trace)
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    task: TaskKind,
    count: usize,
    spec: &DecodeSpec,
    seed: u64,
) -> Result<EvalStats> {
    Ok(EvalStats::from_traces(&eval_traces(params, task, count, spec, seed)?))
}

/// Everything one training iteration produced.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub record: RunRecord,
    pub timing: TimingRecord,
    pub traces: Vec<RolloutTrace>,
    pub curves: DifficultyCurves,
    pub plan: SegmentPlan,
}

pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    reference: ParamSnapshot,
    optimizer: OptimizerState,
    iteration: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh parameters from `config.seed`; the reference snapshot is frozen here.
    pub fn new(config: TrainConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.seed, config.dims());
        Self::with_params(config, params, workers)
    }

    pub fn with_params(config: TrainConfig, params: ModelParams, workers: usize) -> Result<Self> {
        config.validate()?;
        if params.dims() != &config.dims() {
            return Err(Error::Config(format!(
                "parameter shape {:?} does not match config {:?}",
                params.dims(),
                config.dims()
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            reference: ParamSnapshot::new(SnapshotLabel::Ref, &params),
            optimizer: OptimizerState::new(&params, config.optimizer),
            config,
            params,
            iteration: 0,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Number of updates applied so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn evaluate(&self) -> Result<EvalStats> {
        let c = &self.config;
        at_iteration(
            self.iteration,
            self.pool
                .install(|| evaluate(&self.params, c.task, c.eval_count, &c.greedy(), c.seed)),
        )
    }

    pub fn eval_traces(&self, count: usize) -> Result<Vec<RolloutTrace>> {
        let c = &self.config;
        self.pool
            .install(|| eval_traces(&self.params, c.task, count, &c.greedy(), c.seed))
    }

    /// Training prompts of iteration `k` are instances `k*B .. (k+1)*B`.
    fn batch(&self) -> Result<Vec<TaskInstance>> {
        let b = self.config.prompts_per_batch;
        tasks::generate_range(
            self.config.task,
            (self.iteration * b) as u64,
            b,
            self.config.shape(),
            self.config.seed,
        )
    }

    /// Rollouts, shared plan, advantages, scoring and one optimizer step.
    pub fn train_iteration(&mut self) -> Result<IterationOutput> {
        let c = self.config.clone();
        let k = self.iteration;
        let g = c.group_size;
        let old = ParamSnapshot::new(SnapshotLabel::Old, &self.params);
        let current = old.relabeled(SnapshotLabel::Current);
        let instances = self.batch()?;

        let clock = Instant::now();
        let spec = c.sampling();
        let jobs: Vec<(usize, usize)> = (0..instances.len())
            .flat_map(|b| (0..g).map(move |j| (b, j)))
            .collect();
        let traces: Result<Vec<RolloutTrace>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(b, j)| {
                    let inst = &instances[b];
                    let mut trace = sampler::rollout(&old, inst.index, j as u64, &inst.prompt, &spec)?;
                    score_trace(&mut trace, inst);
                    Ok(trace)
                })
                .collect::<Result<_>>()
        });
        let traces = at_iteration(k, traces)?;
        let rollout_time = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let curves = metrics::batch_mean_curves(&traces)?;
        let metric_time = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let plan = c.selector().select(&curves, c.segments)?;
        let selection_time = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let rewards: Vec<f64> = traces.iter().map(|t| t.reward).collect();
        let advantages: Vec<f64> = rewards
            .chunks(g)
            .flat_map(|group| group_advantages(group, c.adv_eps))
            .collect();
        let snapshots = Snapshots {
            current: &current,
            old: &old,
            reference: &self.reference,
        };
        let objective = c.objective();
        let params = &self.params;
        let scored: Result<Vec<(f64, f64, Gradient)>> = self.pool.install(|| {
            traces
                .par_iter()
                .zip(&advantages)
                .map(|(trace, &adv)| {
                    let tl = trajectory_loss(trace, &plan, &snapshots, adv, objective)?;
                    let (loss, grad) = model::loss_and_grad(params, &tl.objectives)?;
                    Ok((loss, tl.mean_kl, grad))
                })
                .collect::<Result<_>>()
        });
        let scored = at_iteration(k, scored)?;
        let scoring_time = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let n = traces.len() as f64;
        let mut grad = ModelParams::zeros(*self.params.dims());
        let (mut loss, mut kl) = (0.0, 0.0);
        for (l, k_, g_) in &scored {
            loss += l;
            kl += k_;
            grad.add_assign(g_);
        }
        loss /= n;
        kl /= n;
        grad.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(k));
        }
        let grad_norm = adam_step(
            &mut self.params,
            &grad,
            &mut self.optimizer,
            c.learning_rate,
            c.clip_norm,
        )?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite(k));
        }
        let update_time = clock.elapsed().as_secs_f64();
        self.iteration += 1;

        let steps = curves.steps() as f64;
        let record = RunRecord {
            mean_reward: Some(rewards.iter().sum::<f64>() / n),
            loss: Some(loss),
            mean_kl: Some(kl),
            grad_norm: Some(grad_norm),
            boundaries: Some(plan.boundaries().to_vec()),
            curve_mean_entropy: Some(curves.entropy().iter().sum::<f64>() / steps),
            curve_mean_inv_margin: Some(curves.inv_margin().iter().sum::<f64>() / steps),
            curve_max_roec: Some(curves.roec().iter().cloned().fold(0.0, f64::max)),
            ..RunRecord::empty(k)
        };
        Ok(IterationOutput {
            record,
            timing: TimingRecord {
                iteration: k,
                rollout: rollout_time,
                metric: metric_time,
                selection: selection_time,
                scoring: scoring_time,
                update: update_time,
            },
            traces,
            curves,
            plan,
        })
    }
}

/// Reports a diverged model as a numeric failure of iteration `k`.
fn at_iteration<T>(k: usize, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::NonFiniteOutput => Error::NonFinite(k),
        e => e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Write the traces of every k-th iteration; 0 disables.
    pub trace_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            trace_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    pub timings: Vec<TimingRecord>,
    pub initial_eval: Option<EvalStats>,
    pub final_eval: EvalStats,
    pub final_checkpoint: PathBuf,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Full training run. Layout of `out_dir`:
///
/// ```text
/// config.toml              effective configuration
/// run_log.jsonl            one RunRecord per update, plus a final eval record
/// timings.jsonl            one TimingRecord per update
/// checkpoints/iter_NNNNN.ckpt, checkpoints/final.ckpt
/// traces/iter_NNNNN.jsonl  when trace_every > 0
/// ```
///
/// Evaluation happens before update `k` whenever `k % eval_every == 0`, and
/// once more after the last update.
pub fn run_training(config: &TrainConfig, out_dir: &Path, options: RunOptions) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone(), options.workers)?;
    let ckpt_dir = out_dir.join("checkpoints");
    let trace_dir = out_dir.join("traces");
    create_dir(&ckpt_dir)?;
    if options.trace_every > 0 {
        create_dir(&trace_dir)?;
    }
    let config_path = out_dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let mut log = JsonlWriter::create(&out_dir.join("run_log.jsonl"))?;
    let mut timing_log = JsonlWriter::create(&out_dir.join("timings.jsonl"))?;

    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut timings = Vec::with_capacity(config.iterations);
    let mut initial_eval = None;
    for k in 0..config.iterations {
        let eval = if config.eval_every > 0 && k % config.eval_every == 0 {
            Some(trainer.evaluate()?)
        } else {
            None
        };
        if k == 0 {
            initial_eval = eval;
        }
        let out = trainer.train_iteration()?;
        let mut record = out.record;
        if let Some(e) = eval {
            record.eval_reward = Some(e.mean_reward);
            record.eval_exact = Some(e.exact_match);
        }
        log.append(&record)?;
        timing_log.append(&out.timing)?;
        if options.trace_every > 0 && k % options.trace_every == 0 {
            trace_io::write_traces(&trace_dir.join(format!("iter_{k:05}.jsonl")), &out.traces)?;
        }
        let done = k + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            trace_io::write_checkpoint(
                &ckpt_dir.join(format!("iter_{done:05}.ckpt")),
                trainer.params(),
                config.seed,
            )?;
        }
        records.push(record);
        timings.push(out.timing);
    }

    let final_eval = trainer.evaluate()?;
    let record = RunRecord {
        eval_reward: Some(final_eval.mean_reward),
        eval_exact: Some(final_eval.exact_match),
        ..RunRecord::empty(config.iterations)
    };
    log.append(&record)?;
    records.push(record);
    let final_checkpoint = ckpt_dir.join("final.ckpt");
    trace_io::write_checkpoint(&final_checkpoint, trainer.params(), config.seed)?;
    Ok(RunSummary {
        records,
        timings,
        initial_eval: initial_eval.or(if config.iterations == 0 { Some(final_eval) } else { None }),
        final_eval,
        final_checkpoint,
    })
}
