use std::fmt;

use serde::{Deserialize, Serialize};

/// The three-way component split plus everything outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Group {
    Emb,
    Att,
    Ffn,
    Other,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Emb, Group::Att, Group::Ffn, Group::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Emb => "EMB",
            Group::Att => "ATT",
            Group::Ffn => "FFN",
            Group::Other => "OTHER",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttKind {
    #[serde(rename = "self")]
    SelfAttn,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
    /// SSRU input projection.
    RecurrentIn,
    /// SSRU forget-gate projection.
    RecurrentForget,
    NormGain,
    NormBias,
    Bias,
}

impl MatrixRole {
    /// Weight matrices that a diagonal initializer may overwrite.
    pub fn is_weight_matrix(self) -> bool {
        !matches!(
            self,
            MatrixRole::NormGain | MatrixRole::NormBias | MatrixRole::Bias
        )
    }
}

/// Locates a parameter in the EMB / ATT / FFN taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentTag {
    pub group: Group,
    pub side: Side,
    pub att_kind: Option<AttKind>,
    pub layer: Option<usize>,
    pub role: Option<MatrixRole>,
}

impl ComponentTag {
    pub fn embedding() -> Self {
        Self {
            group: Group::Emb,
            side: Side::Shared,
            att_kind: None,
            layer: None,
            role: None,
        }
    }

    pub fn attention(side: Side, kind: AttKind, layer: usize, role: MatrixRole) -> Self {
        Self {
            group: Group::Att,
            side,
            att_kind: Some(kind),
            layer: Some(layer),
            role: Some(role),
        }
    }

    pub fn ffn(side: Side, layer: usize, role: MatrixRole) -> Self {
        Self {
            group: Group::Ffn,
            side,
            att_kind: None,
            layer: Some(layer),
            role: Some(role),
        }
    }

    pub fn other(side: Side, layer: Option<usize>, role: MatrixRole) -> Self {
        Self {
            group: Group::Other,
            side,
            att_kind: None,
            layer,
            role: Some(role),
        }
    }

    /// Checks the structural invariants: `att_kind` is present exactly for
    /// ATT, and context attention only lives in the decoder.
    pub fn is_well_formed(&self) -> bool {
        let kind_ok = self.att_kind.is_some() == (self.group == Group::Att);
        let ctx_ok = self.att_kind != Some(AttKind::Context) || self.side == Side::Decoder;
        kind_ok && ctx_ok
    }
}
