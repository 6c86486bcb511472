use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TokenId, BOS, EOS, PAD};

/// Right-padded rows of token ids, stored row-major as `[rows, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    ids: Vec<TokenId>,
    lens: Vec<usize>,
    width: usize,
}

impl Padded {
    pub fn from_seqs<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.resize(ids.len() + width - s.len(), PAD);
            lens.push(s.len());
        }
        Self { ids, lens, width }
    }

    pub fn single(seq: &[TokenId]) -> Self {
        Self::from_seqs(&[seq])
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// The unpadded tokens of row `r`.
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.width..r * self.width + self.lens[r]]
    }

    /// `true` exactly at non-padding positions.
    pub fn mask(&self) -> Vec<bool> {
        self.lens
            .iter()
            .flat_map(|&len| (0..self.width).map(move |t| t < len))
            .collect()
    }
}

/// A training batch. `tgt_out` holds the next-token targets for each
/// position of `tgt_in`, with `PAD` where no target exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Option<Padded>,
    pub tgt_in: Padded,
    pub tgt_out: Vec<TokenId>,
}

impl Batch {
    /// Decoder input `BOS y` and output `y EOS` for every target `y`.
    pub fn new<S: AsRef<[TokenId]>, T: AsRef<[TokenId]>>(srcs: Option<&[S]>, tgts: &[T]) -> Self {
        let inputs: Vec<Vec<TokenId>> = tgts
            .iter()
            .map(|y| {
                std::iter::once(BOS)
                    .chain(y.as_ref().iter().copied())
                    .collect()
            })
            .collect();
        let outputs: Vec<Vec<TokenId>> = tgts
            .iter()
            .map(|y| {
                y.as_ref()
                    .iter()
                    .copied()
                    .chain(std::iter::once(EOS))
                    .collect()
            })
            .collect();
        Self {
            src: srcs.map(Padded::from_seqs),
            tgt_in: Padded::from_seqs(&inputs),
            tgt_out: Padded::from_seqs(&outputs).ids,
        }
    }

    pub fn len(&self) -> usize {
        self.tgt_in.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of non-padding targets.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Example indices for one epoch, shuffled deterministically per
/// `(seed, epoch)` and cut into chunks of `batch_size`.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
