use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchSource, PAD};
use crate::model::{ModelError, Transformer};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no hypotheses to score")]
    Empty,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("corpus has no target tokens")]
    NoTokens,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero precision makes the score 0.
    #[default]
    None,
    /// A precision with no matches becomes `1 / (2 · max(total, 1))`.
    Floor,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 100]` with a single reference per hypothesis.
pub fn corpus_bleu<T, H, R>(
    hyps: &[H],
    refs: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricError>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hyps.is_empty() {
        return Err(MetricError::Empty);
    }
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if let Some(i) = refs.iter().position(|r| r.as_ref().is_empty()) {
        return Err(MetricError::EmptyReference(i));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (&m, &t) in matches.iter().zip(&totals) {
        let p = match (m, smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::Floor) => 1.0 / (2.0 * t.max(1) as f64),
            _ => m as f64 / t as f64,
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Summed negative log-likelihood and count of the non-PAD targets.
pub fn total_nll(
    model: &Transformer,
    data: &dyn BatchSource,
    batch_size: usize,
) -> Result<(f64, usize), MetricError> {
    let (mut nll, mut count) = (0.0, 0);
    let v = model.config().vocab_size;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let b = data.batch(idx);
        let logits = model.logits(b.src.as_ref(), &b.tgt_in)?;
        for (row, &target) in logits.data().chunks(v).zip(&b.tgt_out) {
            if target == PAD {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            count += 1;
        }
    }
    Ok((nll, count))
}

/// `exp(total NLL / predicted tokens)` with teacher forcing; PAD excluded.
pub fn perplexity(
    model: &Transformer,
    data: &dyn BatchSource,
    batch_size: usize,
) -> Result<f64, MetricError> {
    let (nll, count) = total_nll(model, data, batch_size)?;
    if count == 0 {
        return Err(MetricError::NoTokens);
    }
    Ok((nll / count as f64).exp())
}
