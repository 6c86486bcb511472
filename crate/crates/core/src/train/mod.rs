//! Adam training with stall-based early stopping, and the BLEU and
//! perplexity measurements taken on the dev split.

mod adam;
mod decode;
mod metrics;
mod stopping;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use decode::{greedy_decode, greedy_decode_batch};
pub use metrics::{corpus_bleu, perplexity, total_nll, MetricError, Smoothing};
pub use stopping::StallCounter;

use crate::data::{batch_iter, Batch, Corpus, ParallelSet, PAD};
use crate::freezing::{apply_freeze, freeze_at_epoch_hook, FreezeError, FreezeSpec};
use crate::model::{Mode, ModelError, Transformer};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error("optimizer state mismatch: {0}")]
    Optimizer(String),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Freeze(#[from] FreezeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stall_patience_ppl: usize,
    pub stall_patience_bleu: usize,
    pub eval_every: usize,
    /// Seed of the batch shuffling.
    pub seed: u64,
    pub bleu_smoothing: Smoothing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 32,
            max_epochs: 50,
            stall_patience_ppl: 10,
            stall_patience_bleu: 50,
            eval_every: 1,
            seed: 0,
            bleu_smoothing: Smoothing::None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.stall_patience_ppl == 0 || self.stall_patience_bleu == 0 {
            return bad("patiences must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, max_epochs and eval_every must be at least 1");
        }
        Ok(())
    }
}

/// Dev metrics after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-token training loss over the epoch.
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub freeze: String,
    pub ratio: f64,
    pub trainable: usize,
    pub total: usize,
    pub evaluations: Vec<EpochMetrics>,
    pub epochs_trained: usize,
    /// Epoch of the best evaluation, whose parameters the model keeps.
    pub epochs_to_converge: usize,
    pub steps: u64,
    pub final_ppl: f64,
    pub final_bleu: Option<f64>,
    pub warnings: Vec<String>,
    /// Not part of any reproducible output.
    pub wall_clock_secs: f64,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl RunRecord {
    pub const CSV_HEADER: [&'static str; 9] = [
        "freeze",
        "ratio",
        "trainable",
        "total",
        "epochs_trained",
        "epochs_to_converge",
        "steps",
        "final_ppl",
        "final_bleu",
    ];

    /// The reproducible fields as one CSV record, matching [`Self::CSV_HEADER`].
    pub fn csv_record(&self) -> [String; 9] {
        [
            self.freeze.clone(),
            format!("{:.6}", self.ratio),
            self.trainable.to_string(),
            self.total.to_string(),
            self.epochs_trained.to_string(),
            self.epochs_to_converge.to_string(),
            self.steps.to_string(),
            format!("{:.6}", self.final_ppl),
            fmt_opt(self.final_bleu),
        ]
    }

    /// One `epoch,train_loss,dev_ppl,dev_bleu` line per evaluation.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_ppl,dev_bleu\n");
        for e in &self.evaluations {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{}",
                e.epoch,
                e.train_loss,
                e.dev_ppl,
                fmt_opt(e.dev_bleu)
            );
        }
        out
    }

    /// The record with the wall clock zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Loss of one batch; gradients are left on the trainable parameters.
pub fn train_step(model: &mut Transformer, batch: &Batch) -> Result<f64, TrainError> {
    let (loss, mut grads, bindings) = {
        let mut tape = Tape::new();
        let f = model.record(&mut tape, batch.src.as_ref(), &batch.tgt_in)?;
        let loss = tape.cross_entropy(f.logits, &batch.tgt_out, PAD)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Ok(value);
        }
        (value, tape.backward(loss)?, f.bindings)
    };
    let params = model.params_mut();
    params.zero_grads();
    params.store_grads(&bindings, &mut grads)?;
    Ok(loss)
}

/// Dev BLEU of greedy translations, decoded in chunks of `batch_size`.
pub fn dev_bleu(
    model: &Transformer,
    dev: &ParallelSet,
    batch_size: usize,
    smoothing: Smoothing,
) -> Result<f64, TrainError> {
    let max_len = dev.src.iter().map(Vec::len).max().unwrap_or(0) + 2;
    let mut hyps = Vec::with_capacity(dev.src.len());
    for chunk in dev.src.chunks(batch_size.max(1)) {
        hyps.extend(greedy_decode_batch(model, chunk, max_len)?);
    }
    Ok(corpus_bleu(&hyps, &dev.tgt, 4, smoothing)?)
}

/// Selection key, epoch and parameter snapshot of an evaluation.
type Checkpoint = ((f64, f64), usize, Vec<Vec<f64>>);

/// Trains `model` in place under `spec` and leaves it at the best dev
/// evaluation. Translation runs pick the best checkpoint by BLEU (then
/// perplexity), language models by perplexity.
pub fn train(
    model: &mut Transformer,
    corpus: &Corpus,
    spec: &FreezeSpec,
    cfg: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let dev_parallel = match (corpus, model.mode()) {
        (Corpus::Parallel(c), Mode::Translation) => Some(&c.dev),
        (Corpus::Mono(_), Mode::LanguageModel) => None,
        (_, mode) => {
            return Err(TrainError::Config(format!(
                "corpus kind does not fit a {mode:?} model"
            )))
        }
    };
    if corpus.vocab().len() > model.config().vocab_size {
        return Err(TrainError::Config(format!(
            "corpus vocabulary of {} exceeds the model's {}",
            corpus.vocab().len(),
            model.config().vocab_size
        )));
    }
    if corpus.train().is_empty() || corpus.dev().is_empty() {
        return Err(TrainError::Config(
            "train and dev splits must be non-empty".into(),
        ));
    }
    let report = apply_freeze(model.params_mut(), spec)?;
    let mut state = AdamState::new(model.params());
    let adam = cfg.adam();
    let mut ppl_stalls = StallCounter::new(cfg.stall_patience_ppl, false);
    let mut bleu_stalls = StallCounter::new(cfg.stall_patience_bleu, true);
    let mut best: Option<Checkpoint> = None;
    let mut evaluations = Vec::new();
    let mut warnings = Vec::new();
    let mut step = 0u64;
    let mut epochs_trained = 0;
    for epoch in 0..cfg.max_epochs {
        let hook = freeze_at_epoch_hook(model.params_mut(), spec, epoch, &mut state)?;
        warnings.extend(hook.warnings);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in batch_iter(corpus.train(), cfg.batch_size, cfg.seed, epoch as u64) {
            step += 1;
            let loss = train_step(model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            adam_step(model.params_mut(), &mut state, step, &adam)?;
            let n = batch.target_tokens();
            loss_sum += loss * n as f64;
            tokens += n;
        }
        epochs_trained = epoch + 1;
        let last = epoch + 1 == cfg.max_epochs;
        if epochs_trained % cfg.eval_every != 0 && !last {
            continue;
        }
        let dev_ppl = perplexity(model, corpus.dev(), cfg.batch_size)?;
        let bleu = match dev_parallel {
            Some(dev) => Some(dev_bleu(model, dev, cfg.batch_size, cfg.bleu_smoothing)?),
            None => None,
        };
        if !dev_ppl.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        evaluations.push(EpochMetrics {
            epoch: epochs_trained,
            train_loss: loss_sum / tokens.max(1) as f64,
            dev_ppl,
            dev_bleu: bleu,
        });
        let key = (bleu.unwrap_or(0.0), -dev_ppl);
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epochs_trained, model.params().snapshot()));
        }
        ppl_stalls.observe(dev_ppl);
        let mut stop = ppl_stalls.exhausted();
        if let Some(b) = bleu {
            bleu_stalls.observe(b);
            stop |= bleu_stalls.exhausted();
        }
        if stop {
            break;
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one evaluation");
    model.params_mut().restore(&snapshot);
    let at_best = evaluations
        .iter()
        .find(|e| e.epoch == best_epoch)
        .expect("best evaluation");
    Ok(RunRecord {
        freeze: spec.to_string(),
        ratio: report.ratio,
        trainable: report.trainable,
        total: report.total,
        final_ppl: at_best.dev_ppl,
        final_bleu: at_best.dev_bleu,
        evaluations,
        epochs_trained,
        epochs_to_converge: best_epoch,
        steps: step,
        warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
