use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, TokenId, BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Char,
    Word,
}

impl Level {
    /// Splits text into tokens. Word level splits on any whitespace run.
    pub fn split(self, text: &str) -> Vec<&str> {
        match self {
            Level::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            Level::Word => text.split_whitespace().collect(),
        }
    }

    fn join(self, tokens: &[&str]) -> String {
        match self {
            Level::Char => tokens.concat(),
            Level::Word => tokens.join(" "),
        }
    }
}

/// Token/id bijection shared by source and target. Ids 0..4 are reserved
/// for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    level: Level,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Keeps the `max_size` most frequent tokens (all when `None`); ties go
    /// to the lexicographically smaller token. Reserved ids do not count
    /// towards `max_size`.
    pub fn build<S: AsRef<str>>(
        corpus: &[S],
        level: Level,
        max_size: Option<usize>,
    ) -> Result<Self, DataError> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in level.split(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size.unwrap_or(usize::MAX));
        Self::from_tokens(level, ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(
        level: Level,
        tokens: impl IntoIterator<Item = String>,
    ) -> Result<Self, DataError> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Format(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self {
            level,
            tokens: all,
            index,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.level
            .split(text)
            .into_iter()
            .map(|t| self.id(t))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary text. PAD and
    /// BOS are dropped, decoding stops at EOS, UNK prints as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect();
        self.level.join(&toks)
    }

    /// One non-reserved token per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_file_string(text: &str, level: Level) -> Result<Self, DataError> {
        Self::from_tokens(level, text.lines().map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_file_string()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path, level: Level) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_file_string(&text, level)
    }
}
