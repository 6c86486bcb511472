use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Translation,
    LanguageModel,
}

/// What mixes information across target positions inside a decoder layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSelfKind {
    /// Causal multi-head self-attention.
    #[default]
    Attention,
    /// Simpler simple recurrent unit, as used by small distilled students.
    Ssru,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Per-head query/key width; `d_model / n_heads` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_kq: Option<usize>,
    /// Per-head value width; `d_model / n_heads` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub mode: Mode,
    pub max_len: usize,
    #[serde(default)]
    pub decoder_self: DecoderSelfKind,
}

impl ModelConfig {
    pub fn head_dim_kq(&self) -> usize {
        self.d_kq.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    pub fn head_dim_v(&self) -> usize {
        self.d_v.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_dec_layers", self.n_dec_layers),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, explicit) in [("d_kq", self.d_kq), ("d_v", self.d_v)] {
            match explicit {
                Some(0) => return fail(format!("{name} must be at least 1")),
                None if !self.d_model.is_multiple_of(self.n_heads) => {
                    return fail(format!(
                        "n_heads ({}) must divide d_model ({}) when {name} is unset",
                        self.n_heads, self.d_model
                    ))
                }
                _ => {}
            }
        }
        match self.mode {
            Mode::LanguageModel if self.n_enc_layers != 0 => {
                fail("language_model mode must have n_enc_layers == 0".into())
            }
            Mode::Translation if self.n_enc_layers == 0 => {
                fail("translation mode needs at least one encoder layer".into())
            }
            _ => Ok(()),
        }
    }
}
