//! Selecting components, giving them their frozen values, and keeping
//! them out of training.

mod apply;
mod init;
mod selector;
mod spec;

use thiserror::Error;

pub use apply::{apply_freeze, freeze_at_epoch_hook, FreezeReport, HookReport, MomentStore};
pub use init::{diagonal_init, glorot_bound, glorot_init};
pub use selector::{is_freezable, Path, Selector};
pub use spec::{FreezeEntry, FreezeSpec, InitKind};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FreezeError {
    #[error("cannot parse freeze selector {input:?}: {reason}")]
    Parse { input: String, reason: String },
    #[error("selector {0} matches no parameter")]
    EmptySelection(String),
    #[error("diagonal initialization is unsupported for {selector}: it selects embeddings")]
    UnsupportedInit { selector: String },
    #[error("selectors {first} and {second} both select {parameter}")]
    Overlap {
        first: String,
        second: String,
        parameter: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
