use crate::model::{DecoderSelfKind, Mode, ModelConfig};

/// A named full-size architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: ModelConfig,
}

const MAX_LEN: usize = 256;

fn big() -> ModelConfig {
    ModelConfig {
        vocab_size: 36000,
        d_model: 1024,
        d_ff: 4096,
        n_heads: 8,
        d_kq: None,
        d_v: None,
        n_enc_layers: 6,
        n_dec_layers: 6,
        mode: Mode::Translation,
        max_len: MAX_LEN,
        decoder_self: DecoderSelfKind::Attention,
    }
}

/// Every shipped preset, in a fixed order.
pub fn all() -> Vec<Preset> {
    vec![
        Preset {
            name: "big",
            description: "transformer-big, 36K shared vocabulary, 6+6 layers",
            config: big(),
        },
        Preset {
            name: "big-emb128",
            description: "transformer-big with model width 128",
            config: ModelConfig {
                d_model: 128,
                ..big()
            },
        },
        Preset {
            name: "big-ffn1024",
            description: "transformer-big with FFN width 1024",
            config: ModelConfig {
                d_ff: 1024,
                ..big()
            },
        },
        Preset {
            name: "big-att8",
            description:
                "transformer-big with every attention projection 8x narrower (16 per head)",
            config: ModelConfig {
                d_kq: Some(16),
                d_v: Some(16),
                ..big()
            },
        },
        Preset {
            name: "big-diag",
            description: "transformer-big, used with diagonal frozen initialization",
            config: big(),
        },
        Preset {
            name: "big-schedule",
            description: "transformer-big, used with freeze-after-epochs schedules",
            config: big(),
        },
        Preset {
            name: "base",
            description: "transformer-base, 36K shared vocabulary, 6+6 layers",
            config: ModelConfig {
                d_model: 512,
                d_ff: 2048,
                ..big()
            },
        },
        Preset {
            name: "student",
            description:
                "distilled student: 32K vocabulary, width 256, 6 encoder and 2 SSRU decoder layers",
            config: ModelConfig {
                vocab_size: 32000,
                d_model: 256,
                d_ff: 1536,
                n_dec_layers: 2,
                decoder_self: DecoderSelfKind::Ssru,
                ..big()
            },
        },
        Preset {
            name: "lm-base",
            description: "decoder-only transformer-base language model, 32K vocabulary",
            config: ModelConfig {
                vocab_size: 32000,
                d_model: 512,
                d_ff: 2048,
                n_enc_layers: 0,
                mode: Mode::LanguageModel,
                ..big()
            },
        },
    ]
}

pub fn get(name: &str) -> Option<Preset> {
    all().into_iter().find(|p| p.name == name)
}

pub fn names() -> Vec<&'static str> {
    all().iter().map(|p| p.name).collect()
}
