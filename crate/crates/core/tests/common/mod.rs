//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use frozenformer::data::{Padded, TokenId, BOS, EOS, PAD};
use frozenformer::model::Transformer;
use frozenformer::tensor::{Tape, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Differences at or below this are indistinguishable from the rounding
/// noise of a central difference (about `1e-16 * |loss| / FD_STEP`).
pub const ABS_FLOOR: f64 = 1e-8;

/// Relative error, with differences under the absolute floor counted as 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights, so that
/// gradients of normalized outputs (softmax rows, ...) are not trivially 0.
pub fn weighted_sum(tape: &mut Tape<'_>, out: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = tape.constant(shape, uniform(0xfeed, n))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Compares tape gradients of `build` against central differences for every
/// input element. Returns the maximum relative error.
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), v)| tape.constant(shape.clone(), v.clone()).unwrap())
            .collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss)[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, v)| tape.variable(shape.clone(), v.clone()).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; values[i].len()]);
        for j in 0..values[i].len() {
            let orig = values[i][j];
            values[i][j] = orig + FD_STEP;
            let up = eval(&values);
            values[i][j] = orig - FD_STEP;
            let down = eval(&values);
            values[i][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn model_loss(m: &Transformer, src: Option<&Padded>, tgt: &Padded, out: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let f = m.record(&mut tape, src, tgt).unwrap();
    let loss = tape.cross_entropy(f.logits, out, PAD).unwrap();
    tape.value(loss)[0]
}

/// Gradients of the whole model against central differences. Returns the
/// maximum relative error over every trainable element.
pub fn max_gradient_error(
    mut m: Transformer,
    src: Option<Padded>,
    tgt: Padded,
    out: Vec<usize>,
) -> f64 {
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let f = m.record(&mut tape, src.as_ref(), &tgt).unwrap();
        let loss = tape.cross_entropy(f.logits, &out, PAD).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        f.bindings
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    };
    let mut worst: f64 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for idx in 0..m.params().len() {
        if !m.params().get(idx).unwrap().trainable() {
            assert!(analytic[idx].is_none());
            continue;
        }
        let g = analytic[idx]
            .clone()
            .expect("trainable parameter has a gradient");
        for j in 0..g.len() {
            let orig = m.params().get(idx).unwrap().data()[j];
            m.params_mut().get_mut(idx).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = model_loss(&m, src.as_ref(), &tgt, &out);
            m.params_mut().get_mut(idx).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = model_loss(&m, src.as_ref(), &tgt, &out);
            m.params_mut().get_mut(idx).unwrap().data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// BLEU by exhaustive counting: every candidate n-gram is compared against
/// every window of both sentences.
pub fn bleu_oracle(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize, floor: bool) -> f64 {
    let count = |s: &[usize], g: &[usize]| (0..s.len()).filter(|&i| s[i..].starts_with(g)).count();
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let mut seen: Vec<&[usize]> = Vec::new();
            for i in 0..h.len() {
                if i + n > h.len() {
                    break;
                }
                totals[n - 1] += 1;
                let g = &h[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matches[n - 1] += count(h, g).min(count(rf, g));
            }
        }
    }
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if floor {
            0.5 / totals[n].max(1) as f64
        } else {
            return 0.0;
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

pub fn random_pairs(seed: u64, n: usize, alphabet: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=12);
        (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
    };
    let hyps = (0..n).map(|_| sent(&mut rng)).collect();
    let refs = (0..n).map(|_| sent(&mut rng)).collect();
    (hyps, refs)
}

pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Perplexity accumulated one prediction at a time, each from a fresh
/// forward pass over the prefix. `src` is `None` for language models.
pub fn stepwise_perplexity(m: &Transformer, pairs: &[(Option<&[TokenId]>, &[TokenId])]) -> f64 {
    let v = m.config().vocab_size;
    let (mut nll, mut n) = (0.0, 0usize);
    for &(x, y) in pairs {
        for t in 0..=y.len() {
            let prefix: Vec<TokenId> = std::iter::once(BOS).chain(y[..t].iter().copied()).collect();
            let logits = match x {
                Some(x) => m.forward_seq2seq(x, &prefix).unwrap(),
                None => m.forward_lm(&prefix).unwrap(),
            };
            let target = if t < y.len() { y[t] } else { EOS };
            nll -= log_softmax_at(&logits.data()[t * v..(t + 1) * v], target);
            n += 1;
        }
    }
    (nll / n as f64).exp()
}
