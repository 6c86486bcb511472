//! Experiment grids: one file per results table, run over seeds, with
//! ratio checks at full scale and ordering checks on desk-scale medians.

mod grid;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{
    DeskModel, Direction, ExperimentSpec, Grid, LmSyntheticTask, Metric, ModelSource, OrderingSpec,
    Severity, TaskSource,
};
pub use report::{assert_ordering, GridReport, OrderingResult, RowSummary, RunResult, RunTiming};

use crate::accounting::{count_budget, presets, AccountingError};
use crate::data::{gen_lm_text, Corpus, DataError, Level, MonoCorpus, ParallelCorpus};
use crate::model::{ModelConfig, ModelError, Transformer};
use crate::train::{train, RunRecord, TrainConfig};

/// Caps the worker count of [`run_grid`].
pub const THREADS_ENV: &str = "FROZENFORMER_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("no row named {0}")]
    MissingRow(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("report encoding failed: {0}")]
    Encode(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    /// Train every (row, seed) pair.
    Full,
    /// Only the parameter-count checks.
    RatiosOnly,
}

/// Workers actually used for a requested `parallelism`.
pub fn effective_threads(parallelism: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = parallelism.max(1);
    cap.map_or(n, |c| n.min(c))
}

pub fn build_corpus(task: &TaskSource) -> Result<Corpus, DataError> {
    Ok(match task {
        TaskSource::Synthetic(spec) => Corpus::Parallel(ParallelCorpus::synthetic(spec)?),
        TaskSource::LmSynthetic(t) => {
            let lines = gen_lm_text(&t.text_spec())?;
            Corpus::Mono(MonoCorpus::from_lines(&lines, t.n_dev, Level::Char, None)?)
        }
        TaskSource::LmFile { path, n_dev, level } => {
            Corpus::Mono(MonoCorpus::load(path, *n_dev, *level, None)?)
        }
        TaskSource::ParallelFiles {
            src,
            tgt,
            n_dev,
            level,
        } => Corpus::Parallel(ParallelCorpus::load(src, tgt, *n_dev, *level, None)?),
    })
}

/// Longest decoder or encoder input the corpus can produce.
fn longest_input(corpus: &Corpus) -> usize {
    let longest = |seqs: &[Vec<usize>]| seqs.iter().map(Vec::len).max().unwrap_or(0);
    match corpus {
        Corpus::Parallel(c) => [&c.train, &c.dev]
            .iter()
            .map(|s| longest(&s.src).max(longest(&s.tgt) + 1))
            .max()
            .unwrap_or(0),
        Corpus::Mono(c) => longest(&c.train.seqs).max(longest(&c.dev.seqs)) + 1,
    }
}

/// The configuration an experiment trains.
pub fn training_config(
    spec: &ExperimentSpec,
    corpus: &Corpus,
) -> Result<ModelConfig, HarnessError> {
    match &spec.model {
        ModelSource::Desk(d) => Ok(d.config(
            corpus.vocab().len(),
            longest_input(corpus),
            spec.task.mode(),
        )),
        ModelSource::Preset { preset } => {
            let p = presets::get(preset)
                .ok_or_else(|| HarnessError::Grid(format!("unknown preset {preset}")))?;
            Ok(ModelConfig {
                vocab_size: p.config.vocab_size.max(corpus.vocab().len()),
                max_len: p.config.max_len.max(longest_input(corpus)),
                ..p.config
            })
        }
    }
}

/// Trains one seed of a row. The flag tells whether the run's ratio equals
/// the accounting module's count for the trained configuration.
fn run_one(spec: &ExperimentSpec, corpus: &Corpus, seed: u64) -> Result<(RunRecord, bool), String> {
    let cfg = training_config(spec, corpus).map_err(|e| e.to_string())?;
    let expected = count_budget(&cfg, &spec.freeze).map_err(|e| e.to_string())?;
    let mut model = Transformer::build(cfg, seed).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let record = train(&mut model, corpus, &spec.freeze, &train_cfg).map_err(|e| e.to_string())?;
    let matches = record.ratio == expected.ratio && record.trainable == expected.trainable;
    Ok((record, matches))
}

/// Runs every (row, seed) pair on up to `parallelism` workers and
/// assembles the report. A failed run marks its row and the grid goes on.
pub fn run_grid(
    grid: &Grid,
    parallelism: usize,
    mode: RunMode,
) -> Result<GridReport, HarnessError> {
    grid.validate()?;
    let mut tasks: Vec<&TaskSource> = Vec::new();
    for e in &grid.experiments {
        if !tasks.contains(&&e.task) {
            tasks.push(&e.task);
        }
    }
    let mut jobs = Vec::new();
    for e in &grid.experiments {
        let t = tasks
            .iter()
            .position(|t| *t == &e.task)
            .expect("collected task");
        jobs.extend(e.seeds.iter().map(|&s| (e, t, s)));
    }
    let mut outcomes = Vec::new();
    if mode == RunMode::Full && !jobs.is_empty() {
        let corpora = tasks
            .iter()
            .map(|t| build_corpus(t))
            .collect::<Result<Vec<_>, _>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(effective_threads(parallelism))
            .build()
            .map_err(|e| HarnessError::Grid(format!("thread pool: {e}")))?;
        outcomes = pool.install(|| {
            jobs.par_iter()
                .map(|&(e, t, seed)| {
                    let started = std::time::Instant::now();
                    let out = run_one(e, &corpora[t], seed);
                    (e.id.clone(), seed, out, started.elapsed().as_secs_f64())
                })
                .collect::<Vec<_>>()
        });
    }
    report::assemble(grid, outcomes)
}

/// Full-size ratio of a row, if it names a preset to check.
pub fn full_scale_budget(
    spec: &ExperimentSpec,
) -> Result<Option<crate::accounting::ParamBudget>, HarnessError> {
    match &spec.ratio_preset {
        None => Ok(None),
        Some(p) => {
            let preset =
                presets::get(p).ok_or_else(|| HarnessError::Grid(format!("unknown preset {p}")))?;
            Ok(Some(count_budget(&preset.config, &spec.freeze)?))
        }
    }
}
