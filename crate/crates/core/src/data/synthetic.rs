use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Desk-scale translation tasks over a word-level symbol alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    /// Maps symbol `i` to `(i + shift) mod alphabet`, then reverses.
    SubstituteShift {
        shift: usize,
    },
}

impl Task {
    /// The target for a source given as symbol indices.
    pub fn apply(self, src: &[usize], alphabet: usize) -> Vec<usize> {
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::SubstituteShift { shift } => {
                src.iter().rev().map(|&i| (i + shift) % alphabet).collect()
            }
        }
    }
}

/// Name of symbol `i`: `a`..`z`, then `s26`, `s27`, ...
pub fn symbol(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        format!("s{i}")
    }
}

pub fn symbol_index(s: &str) -> Option<usize> {
    let b = s.as_bytes();
    match b {
        [c] if c.is_ascii_lowercase() => Some(usize::from(c - b'a')),
        [b's', rest @ ..] if !rest.is_empty() => std::str::from_utf8(rest)
            .ok()?
            .parse()
            .ok()
            .filter(|&i| i >= 26),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_dev: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet_size: usize,
    pub seed: u64,
}

/// Sentence pairs as whitespace-separated symbol text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelText {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelText {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.src
            .iter()
            .map(String::as_str)
            .zip(self.tgt.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSplit {
    pub train: ParallelText,
    pub dev: ParallelText,
}

fn possible_sources(alphabet: usize, min_len: usize, max_len: usize) -> f64 {
    (min_len..=max_len)
        .map(|l| (alphabet as f64).powi(l as i32))
        .sum()
}

/// Generates `n_train + n_dev` pairs with pairwise distinct sources, so the
/// dev split shares no source with the train split.
pub fn gen_synthetic_translation(spec: &SyntheticSpec) -> Result<SyntheticSplit, DataError> {
    let bad = |msg: String| Err(DataError::Config(msg));
    if spec.alphabet_size < 2 {
        return bad(format!(
            "alphabet_size must be at least 2, got {}",
            spec.alphabet_size
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return bad(format!(
            "need 1 <= min_len <= max_len, got {}..{}",
            spec.min_len, spec.max_len
        ));
    }
    if let Task::SubstituteShift { shift } = spec.task {
        if shift % spec.alphabet_size == 0 {
            return bad(format!("shift {shift} is a multiple of the alphabet size"));
        }
    }
    let n = spec.n_train + spec.n_dev;
    // Rejection sampling stays fast while at most half the space is used.
    if n as f64 > possible_sources(spec.alphabet_size, spec.min_len, spec.max_len) / 2.0 {
        return bad(format!(
            "{n} distinct sources requested from too small a space"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(n);
    let mut text = ParallelText::default();
    while text.len() < n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..spec.alphabet_size))
            .collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt = spec.task.apply(&src, spec.alphabet_size);
        let words = |s: &[usize]| s.iter().map(|&i| symbol(i)).collect::<Vec<_>>().join(" ");
        text.src.push(words(&src));
        text.tgt.push(words(&tgt));
    }
    let dev = ParallelText {
        src: text.src.split_off(spec.n_train),
        tgt: text.tgt.split_off(spec.n_train),
    };
    Ok(SyntheticSplit { train: text, dev })
}

/// Settings of the synthetic character-level language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTextSpec {
    pub n_lines: usize,
    /// Distinct characters used to spell words (at most 120).
    pub alphabet_size: usize,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

const LM_CHARS: &str = concat!(
    "abcdefghijklmnopqrstuvwxyz",
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    "0123456789",
    "αβγδεζηθικλμνξοπρστυφχψω",
    "абвгдежзийклмнопрстуфхцчшщэюя",
    "+-*/=<>()[]{}#%&@$",
);

/// Lines of a toy language: a Zipf-distributed lexicon whose words prefer
/// a few successors each, spelled over `alphabet_size` characters.
pub fn gen_lm_text(spec: &LmTextSpec) -> Result<Vec<String>, DataError> {
    let chars: Vec<char> = LM_CHARS.chars().collect();
    if spec.alphabet_size < 2 || spec.alphabet_size > chars.len() {
        return Err(DataError::Config(format!(
            "alphabet_size must be in 2..={}, got {}",
            chars.len(),
            spec.alphabet_size
        )));
    }
    if spec.lexicon_size < 2 || spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(DataError::Config(
            "need lexicon_size >= 2 and 1 <= min_words <= max_words".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut lexicon = Vec::with_capacity(spec.lexicon_size);
    let mut attempts = 0;
    while lexicon.len() < spec.lexicon_size {
        attempts += 1;
        if attempts > 1000 * spec.lexicon_size {
            return Err(DataError::Config(
                "alphabet too small for the requested lexicon".into(),
            ));
        }
        let len = rng.gen_range(2..=6);
        let w: String = (0..len)
            .map(|_| chars[rng.gen_range(0..spec.alphabet_size)])
            .collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let zipf = WeightedIndex::new((1..=spec.lexicon_size).map(|r| 1.0 / r as f64))
        .expect("positive weights");
    let successors: Vec<[usize; 3]> = (0..spec.lexicon_size)
        .map(|_| [0; 3].map(|_| zipf.sample(&mut rng)))
        .collect();
    let mut lines = Vec::with_capacity(spec.n_lines);
    for _ in 0..spec.n_lines {
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let mut w = zipf.sample(&mut rng);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            words.push(lexicon[w].as_str());
            w = if rng.gen_bool(0.8) {
                successors[w][rng.gen_range(0..3)]
            } else {
                zipf.sample(&mut rng)
            };
        }
        lines.push(words.join(" "));
    }
    Ok(lines)
}
