//! Tokenization, synthetic tasks, corpus loading and batching.

mod batch;
mod synthetic;
mod vocab;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use batch::{epoch_order, Batch, Padded};
pub use synthetic::{
    gen_lm_text, gen_synthetic_translation, symbol, symbol_index, LmTextSpec, ParallelText,
    SyntheticSpec, SyntheticSplit, Task,
};
pub use vocab::{Level, Vocab, RESERVED};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid data settings: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("parallel files are misaligned: {src} source lines vs {tgt} target lines")]
    Misaligned { src: usize, tgt: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Anything batches can be cut from.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The batch made of the examples at `indices`, in that order.
    fn batch(&self, indices: &[usize]) -> Batch;

    /// Non-PAD decoder targets over the whole set, EOS included.
    fn target_tokens(&self) -> usize;
}

/// Aligned source/target id sequences. Sources end with EOS.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelSet {
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
}

impl BatchSource for ParallelSet {
    fn len(&self) -> usize {
        self.src.len()
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        let src: Vec<&[TokenId]> = indices.iter().map(|&i| self.src[i].as_slice()).collect();
        let tgt: Vec<&[TokenId]> = indices.iter().map(|&i| self.tgt[i].as_slice()).collect();
        Batch::new(Some(&src), &tgt)
    }

    fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }
}

/// Single-side id sequences for language modelling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MonoSet {
    pub seqs: Vec<Vec<TokenId>>,
}

impl BatchSource for MonoSet {
    fn len(&self) -> usize {
        self.seqs.len()
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        let tgt: Vec<&[TokenId]> = indices.iter().map(|&i| self.seqs[i].as_slice()).collect();
        Batch::new(None::<&[&[TokenId]]>, &tgt)
    }

    fn target_tokens(&self) -> usize {
        self.seqs.iter().map(|t| t.len() + 1).sum()
    }
}

/// Batches of one epoch, shuffled per `(seed, epoch)` and padded to the
/// longest sequence of each batch.
pub fn batch_iter<'a, D: BatchSource + ?Sized>(
    data: &'a D,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch> + 'a {
    epoch_order(data.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |idx| data.batch(&idx))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub vocab: Vocab,
    pub train: ParallelSet,
    pub dev: ParallelSet,
}

impl ParallelCorpus {
    /// Builds a shared vocabulary from both sides of `train` and encodes
    /// both splits. Train pairs whose source also occurs in dev are dropped.
    pub fn from_text(
        train: &ParallelText,
        dev: &ParallelText,
        level: Level,
        max_vocab: Option<usize>,
    ) -> Result<Self, DataError> {
        for t in [train, dev] {
            if t.src.len() != t.tgt.len() {
                return Err(DataError::Misaligned {
                    src: t.src.len(),
                    tgt: t.tgt.len(),
                });
            }
        }
        let dev_src: HashSet<&str> = dev.src.iter().map(String::as_str).collect();
        let kept: Vec<(&str, &str)> = train
            .pairs()
            .filter(|(s, _)| !dev_src.contains(s))
            .collect();
        if kept.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let both: Vec<&str> = kept.iter().flat_map(|&(s, t)| [s, t]).collect();
        let vocab = Vocab::build(&both, level, max_vocab)?;
        let encode = |pairs: &mut dyn Iterator<Item = (&str, &str)>| {
            let mut set = ParallelSet::default();
            for (s, t) in pairs {
                let mut src = vocab.encode(s);
                src.push(EOS);
                set.src.push(src);
                set.tgt.push(vocab.encode(t));
            }
            set
        };
        let train = encode(&mut kept.iter().copied());
        let dev = encode(&mut dev.pairs());
        Ok(Self { vocab, train, dev })
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self, DataError> {
        let split = gen_synthetic_translation(spec)?;
        Self::from_text(&split.train, &split.dev, Level::Word, None)
    }

    /// Two aligned files; the first `n_dev` pairs form the dev split.
    pub fn load(
        src: &Path,
        tgt: &Path,
        n_dev: usize,
        level: Level,
        max_vocab: Option<usize>,
    ) -> Result<Self, DataError> {
        let read = |p: &Path| -> Result<Vec<String>, DataError> {
            let text = std::fs::read_to_string(p).map_err(|e| DataError::io(p, e))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let (s, t) = (read(src)?, read(tgt)?);
        if s.len() != t.len() {
            return Err(DataError::Misaligned {
                src: s.len(),
                tgt: t.len(),
            });
        }
        let n_dev = n_dev.min(s.len());
        let dev = ParallelText {
            src: s[..n_dev].to_vec(),
            tgt: t[..n_dev].to_vec(),
        };
        let train = ParallelText {
            src: s[n_dev..].to_vec(),
            tgt: t[n_dev..].to_vec(),
        };
        Self::from_text(&train, &dev, level, max_vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonoCorpus {
    pub vocab: Vocab,
    pub train: MonoSet,
    pub dev: MonoSet,
}

impl MonoCorpus {
    /// The first `n_dev` non-empty lines form the dev split; train lines
    /// identical to a dev line are dropped.
    pub fn from_lines<S: AsRef<str>>(
        lines: &[S],
        n_dev: usize,
        level: Level,
        max_vocab: Option<usize>,
    ) -> Result<Self, DataError> {
        let lines: Vec<&str> = lines
            .iter()
            .map(AsRef::as_ref)
            .filter(|l| !l.trim().is_empty())
            .collect();
        let n_dev = n_dev.min(lines.len());
        let (dev, rest) = lines.split_at(n_dev);
        let dev_set: HashSet<&str> = dev.iter().copied().collect();
        let train: Vec<&str> = rest
            .iter()
            .copied()
            .filter(|l| !dev_set.contains(l))
            .collect();
        let vocab = Vocab::build(&train, level, max_vocab)?;
        let encode = |ls: &[&str]| MonoSet {
            seqs: ls.iter().map(|l| vocab.encode(l)).collect(),
        };
        Ok(Self {
            train: encode(&train),
            dev: encode(dev),
            vocab,
        })
    }

    pub fn load(
        path: &Path,
        n_dev: usize,
        level: Level,
        max_vocab: Option<usize>,
    ) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_lines(&text.lines().collect::<Vec<_>>(), n_dev, level, max_vocab)
    }
}

/// Either kind of corpus, as consumed by the training loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corpus {
    Parallel(ParallelCorpus),
    Mono(MonoCorpus),
}

impl Corpus {
    pub fn vocab(&self) -> &Vocab {
        match self {
            Corpus::Parallel(c) => &c.vocab,
            Corpus::Mono(c) => &c.vocab,
        }
    }

    pub fn train(&self) -> &dyn BatchSource {
        match self {
            Corpus::Parallel(c) => &c.train,
            Corpus::Mono(c) => &c.train,
        }
    }

    pub fn dev(&self) -> &dyn BatchSource {
        match self {
            Corpus::Parallel(c) => &c.dev,
            Corpus::Mono(c) => &c.dev,
        }
    }
}
