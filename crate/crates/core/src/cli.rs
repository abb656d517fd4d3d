//! `atpo` command line. Exit status: 0 success, 2 usage or configuration,
//! 3 I/O, 4 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis;
use crate::config::TrainConfig;
use crate::domain::Vocab;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_MARGIN_EPS;
use crate::rl::{eval_traces, run_training, EvalStats, RunOptions};
use crate::sampler::{DecodeMode, DecodeSpec};
use crate::selection::{SelectionPolicy, StepSelector};
use crate::tasks::{self, TaskKind, TaskShape};
use crate::trace_io;

#[derive(Debug, Parser)]
#[command(name = "atpo", version, about = "Adaptive step selection for diffusion-LM policy optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a task dataset, one `task<TAB>prompt<TAB>gold` line per instance.
    GenerateData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        count: usize,
        /// Completion length L.
        #[arg(long, default_value_t = 16)]
        length: usize,
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw from the held-out index range instead of the training range.
        #[arg(long)]
        held_out: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config; prints the final greedy eval.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Concurrent rollout and scoring workers; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Save the traces of every k-th iteration (0 = never).
        #[arg(long, default_value_t = 0)]
        trace_every: usize,
    },
    /// Roll out a checkpoint on held-out instances; prints mean reward and exact-match rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Argmax decoding; without it tokens are sampled at --temperature.
        #[arg(long)]
        greedy: bool,
        /// Denoising steps T (default: the checkpoint's L).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Also write the rollouts as a trace file.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Print the segment boundaries chosen for a curves file.
    Select {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "hybrid")]
        policy: SelectionPolicy,
        /// Multiplier k of the instability threshold mean + k * std.
        #[arg(long, default_value_t = 1.0)]
        sigma_multiplier: f64,
    },
    /// Analysis tables.
    Analyze {
        #[command(subcommand)]
        command: AnalyzeCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Mean curves of correct and incorrect rollouts, with counts.
    OutcomeCurves {
        /// Trace files; all traces are pooled.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Eval reward per iteration, one column per run.
    Compare {
        /// Run logs as `LABEL=PATH`, or `PATH` (labelled by its directory name).
        #[arg(required = true)]
        runs: Vec<String>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock ratio of an adaptive run over a uniform run.
    Overhead {
        /// `timings.jsonl` of the adaptive run.
        #[arg(long)]
        adaptive: PathBuf,
        /// `timings.jsonl` of the uniform run.
        #[arg(long)]
        uniform: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Results go to `out`, diagnostics to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenerateData {
            task,
            count,
            length,
            prompt_len,
            seed,
            held_out,
            out: path,
        } => {
            let shape = TaskShape {
                prompt_len,
                completion_len: length,
            };
            let start = if held_out { tasks::EVAL_OFFSET } else { 0 };
            let instances = tasks::generate_range(task, start, count, shape, seed)?;
            trace_io::write_dataset(&path, &instances)
        }
        Command::Train {
            config,
            out_dir,
            workers,
            trace_every,
        } => {
            let cfg = TrainConfig::load(&config)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let summary = run_training(&cfg, &out_dir, RunOptions { workers, trace_every })?;
            emit(out, &eval_lines(&summary.final_eval))
        }
        Command::Eval {
            checkpoint,
            task,
            count,
            greedy,
            steps,
            seed,
            temperature,
            traces,
        } => {
            let ck = trace_io::read_checkpoint(&checkpoint)?;
            let dims = *ck.params.dims();
            let vocab = Vocab::arithmetic().size();
            if dims.vocab != vocab {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary has {} ids, tasks use {vocab}",
                    dims.vocab
                )));
            }
            let spec = DecodeSpec {
                steps: steps.unwrap_or(dims.completion_len),
                completion_len: dims.completion_len,
                temperature,
                mode: if greedy { DecodeMode::Greedy } else { DecodeMode::Sample },
                seed,
                margin_eps: DEFAULT_MARGIN_EPS,
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let rollouts = eval_traces(&ck.params, task, count, &spec, seed)?;
            if let Some(path) = traces {
                trace_io::write_traces(&path, &rollouts)?;
            }
            emit(out, &eval_lines(&EvalStats::from_traces(&rollouts)))
        }
        Command::Select {
            curves,
            n,
            policy,
            sigma_multiplier,
        } => {
            let curves = trace_io::read_curves(&curves)?;
            let selector = StepSelector {
                policy,
                sigma_multiplier,
            };
            let plan = selector.select(&curves, n)?;
            let text: Vec<String> = plan.boundaries().iter().map(|b| b.to_string()).collect();
            emit(out, &format!("{}\n", text.join(" ")))
        }
        Command::Analyze { command } => analyze(command, out),
    }
}

fn eval_lines(stats: &EvalStats) -> String {
    format!(
        "count\t{}\nmean_reward\t{}\nexact_match\t{}\n",
        stats.count, stats.mean_reward, stats.exact_match
    )
}

fn run_label(spec: &str) -> (String, PathBuf) {
    if let Some((label, path)) = spec.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let label = path
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    (label, path)
}

fn analyze(command: AnalyzeCommand, out: &mut dyn Write) -> Result<()> {
    match command {
        AnalyzeCommand::OutcomeCurves { traces, out_dir } => {
            let mut all = Vec::new();
            for path in &traces {
                all.extend(trace_io::read_traces(path)?);
            }
            let curves = analysis::outcome_curves(&all)?;
            analysis::write_outcome_curves(&out_dir, &curves)?;
            emit(
                out,
                &format!(
                    "correct\t{}\nincorrect\t{}\n",
                    curves.correct_count, curves.incorrect_count
                ),
            )
        }
        AnalyzeCommand::Compare { runs, out: target } => {
            let mut logs = Vec::with_capacity(runs.len());
            for spec in &runs {
                let (label, path) = run_label(spec);
                logs.push((label, trace_io::read_run_log(&path)?.records));
            }
            let table = analysis::compare_runs(&logs)?.to_tsv();
            match target {
                Some(path) => std::fs::write(&path, table).map_err(|e| Error::io(&path, e)),
                None => emit(out, &table),
            }
        }
        AnalyzeCommand::Overhead { adaptive, uniform } => {
            let report = analysis::selection_overhead(
                &analysis::load_timings(&adaptive)?,
                &analysis::load_timings(&uniform)?,
            )?;
            emit(out, &report.to_tsv())
        }
    }
}
