use std::fmt;
use std::str::FromStr;

use super::FreezeError;
use crate::model::{AttKind, ComponentTag, Group, Side};

/// A named subset of the freezable components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Path {
    Emb,
    Att,
    Ffn,
    AttSelf,
    AttContext,
    /// Encoder self-attention.
    AttEnc,
    /// Decoder self-attention and context attention.
    AttDec,
    FfnEnc,
    FfnDec,
}

impl Path {
    pub const ALL: [Path; 9] = [
        Path::Emb,
        Path::Att,
        Path::Ffn,
        Path::AttSelf,
        Path::AttContext,
        Path::AttEnc,
        Path::AttDec,
        Path::FfnEnc,
        Path::FfnDec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Path::Emb => "emb",
            Path::Att => "att",
            Path::Ffn => "ffn",
            Path::AttSelf => "att.self",
            Path::AttContext => "att.context",
            Path::AttEnc => "att.enc",
            Path::AttDec => "att.dec",
            Path::FfnEnc => "ffn.enc",
            Path::FfnDec => "ffn.dec",
        }
    }

    fn contains(self, tag: &ComponentTag) -> bool {
        let att = tag.group == Group::Att;
        let ffn = tag.group == Group::Ffn;
        match self {
            Path::Emb => tag.group == Group::Emb,
            Path::Att => att,
            Path::Ffn => ffn,
            Path::AttSelf => att && tag.att_kind == Some(AttKind::SelfAttn),
            Path::AttContext => att && tag.att_kind == Some(AttKind::Context),
            Path::AttEnc => att && tag.side == Side::Encoder,
            Path::AttDec => att && tag.side == Side::Decoder,
            Path::FfnEnc => ffn && tag.side == Side::Encoder,
            Path::FfnDec => ffn && tag.side == Side::Decoder,
        }
    }
}

/// A [`Path`], optionally negated. A negated selector picks the complement
/// of its path within EMB, ATT and FFN; OTHER is never selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Selector {
    pub path: Path,
    pub negated: bool,
}

/// Whether a parameter may be frozen at all.
pub fn is_freezable(tag: &ComponentTag) -> bool {
    tag.group != Group::Other
}

impl Selector {
    pub fn new(path: Path) -> Self {
        Self {
            path,
            negated: false,
        }
    }

    pub fn negate(self) -> Self {
        Self {
            negated: !self.negated,
            ..self
        }
    }

    pub fn matches(&self, tag: &ComponentTag) -> bool {
        is_freezable(tag) && self.path.contains(tag) != self.negated
    }

    /// Whether any parameter this selector can match is an embedding.
    pub fn may_select_embeddings(&self) -> bool {
        self.matches(&ComponentTag::embedding())
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("!")?;
        }
        f.write_str(self.path.as_str())
    }
}

impl FromStr for Selector {
    type Err = FreezeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (negated, body) = match s.strip_prefix('!') {
            Some(rest) => (true, rest.trim()),
            None => (false, s),
        };
        let path = Path::ALL
            .into_iter()
            .find(|p| p.as_str() == body)
            .ok_or_else(|| FreezeError::Parse {
                input: s.to_string(),
                reason: format!(
                    "unknown component path {body:?}; expected one of {}",
                    Path::ALL.map(Path::as_str).join(", ")
                ),
            })?;
        Ok(Selector { path, negated })
    }
}
