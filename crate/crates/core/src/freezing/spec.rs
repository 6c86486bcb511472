use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::selector::Selector;
use super::FreezeError;
use crate::model::TaggedParam;

/// Value a frozen matrix holds while frozen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Keep the Glorot draw made when the model was built.
    #[default]
    Glorot,
    /// Overwrite every selected weight matrix with a rectangular identity.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FreezeEntry {
    pub selector: Selector,
    pub init: InitKind,
    /// Number of completed epochs after which the selection stops
    /// training. 0 freezes it from initialization.
    pub at_epoch: usize,
}

impl FreezeEntry {
    pub fn new(selector: Selector) -> Self {
        Self {
            selector,
            init: InitKind::Glorot,
            at_epoch: 0,
        }
    }
}

impl fmt::Display for FreezeEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.selector)?;
        if self.init == InitKind::Diagonal {
            f.write_str("@diag")?;
        }
        if self.at_epoch > 0 {
            write!(f, "@epoch={}", self.at_epoch)?;
        }
        Ok(())
    }
}

impl FromStr for FreezeEntry {
    type Err = FreezeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: String| FreezeError::Parse {
            input: s.to_string(),
            reason,
        };
        let mut parts = s.split('@');
        let mut entry = FreezeEntry::new(parts.next().unwrap_or_default().parse()?);
        let (mut saw_diag, mut saw_epoch) = (false, false);
        for suffix in parts.map(str::trim) {
            if suffix == "diag" && !saw_diag {
                saw_diag = true;
                entry.init = InitKind::Diagonal;
            } else if let (Some(n), false) = (suffix.strip_prefix("epoch="), saw_epoch) {
                saw_epoch = true;
                entry.at_epoch = n
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad epoch count {n:?}")))?;
            } else {
                return Err(err(format!("unknown or repeated suffix @{suffix}")));
            }
        }
        Ok(entry)
    }
}

/// Which components to freeze, how they are initialized, and when.
///
/// Textual form: comma-separated entries such as `att@diag`, `emb,ffn` or
/// `att.self@epoch=2`; an empty string or `none` means nothing is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FreezeSpec {
    entries: Vec<FreezeEntry>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<FreezeEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[FreezeEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The spec with one more entry.
    pub fn with(mut self, entry: FreezeEntry) -> Self {
        self.entries.push(entry);
        self
    }

    /// Registry indices selected by each entry, after checking that every
    /// entry selects something, that entries are pairwise disjoint, and
    /// that diagonal initialization never touches embeddings.
    pub fn resolve<P: TaggedParam>(&self, params: &[P]) -> Result<Vec<Vec<usize>>, FreezeError> {
        let mut owner: Vec<Option<usize>> = vec![None; params.len()];
        let mut selected = Vec::with_capacity(self.entries.len());
        for (e, entry) in self.entries.iter().enumerate() {
            if entry.init == InitKind::Diagonal && entry.selector.may_select_embeddings() {
                return Err(FreezeError::UnsupportedInit {
                    selector: entry.to_string(),
                });
            }
            let hits: Vec<usize> = params
                .iter()
                .enumerate()
                .filter(|(_, p)| entry.selector.matches(p.tag()))
                .map(|(i, _)| i)
                .collect();
            if hits.is_empty() {
                return Err(FreezeError::EmptySelection(entry.to_string()));
            }
            for &i in &hits {
                if let Some(prev) = owner[i].replace(e) {
                    return Err(FreezeError::Overlap {
                        first: self.entries[prev].to_string(),
                        second: entry.to_string(),
                        parameter: params[i].name().to_string(),
                    });
                }
            }
            selected.push(hits);
        }
        Ok(selected)
    }
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("none");
        }
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl FromStr for FreezeSpec {
    type Err = FreezeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::none());
        }
        let entries = s
            .split(',')
            .map(|e| e.trim().parse())
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

impl TryFrom<String> for FreezeSpec {
    type Error = FreezeError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FreezeSpec> for String {
    fn from(s: FreezeSpec) -> Self {
        s.to_string()
    }
}
