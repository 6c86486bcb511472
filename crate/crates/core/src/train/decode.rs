use crate::data::{Padded, TokenId, BOS, EOS};
use crate::model::{Mode, ModelError, Transformer};

/// Greedy decoding of a batch of sources in lockstep. Each output stops
/// before EOS or after `max_len` tokens and excludes BOS and EOS.
pub fn greedy_decode_batch<S: AsRef<[TokenId]>>(
    model: &Transformer,
    srcs: &[S],
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>, ModelError> {
    if model.mode() != Mode::Translation {
        return Err(ModelError::WrongMode {
            op: "greedy_decode",
            mode: model.mode(),
        });
    }
    let rows = srcs.len();
    let max_len = max_len.min(model.config().max_len);
    let src = Padded::from_seqs(srcs);
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS]; rows];
    let mut done = vec![false; rows];
    let v = model.config().vocab_size;
    for _ in 0..max_len {
        if rows == 0 || done.iter().all(|&d| d) {
            break;
        }
        let tgt = Padded::from_seqs(&prefixes);
        let width = tgt.width();
        let logits = model.logits(Some(&src), &tgt)?;
        for r in 0..rows {
            let last = &logits.data()[(r * width + width - 1) * v..(r * width + width) * v];
            let next = argmax(last);
            if !done[r] {
                done[r] = next == EOS;
            }
            prefixes[r].push(next);
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS).collect())
        .collect())
}

pub fn greedy_decode(
    model: &Transformer,
    src: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    Ok(greedy_decode_batch(model, &[src], max_len)?.remove(0))
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
