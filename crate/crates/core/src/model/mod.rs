//! The transformer, its configuration, and the tagged parameter registry.

mod checkpoint;
mod config;
mod registry;
mod tag;
mod transformer;

use thiserror::Error;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint};
pub use config::{ConfigError, DecoderSelfKind, Mode, ModelConfig};
pub use registry::{count_by_group, ParamSpec, Parameter, ParameterRegistry, TaggedParam};
pub use tag::{AttKind, ComponentTag, Group, MatrixRole, Side};
pub use transformer::{
    multi_head_attention, param_specs, positional_encodings, AttentionWeights, Forward, HeadDims,
    Transformer, LAYER_NORM_EPS,
};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} is out of range for a vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("{op} is not available in {mode:?} mode")]
    WrongMode { op: &'static str, mode: Mode },
    #[error("decoder input must contain at least one token")]
    EmptyTarget,
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
