//! Decoder architecture: config, parameters, full and cached forward passes,
//! and the checkpoint container.

mod cache;
mod checkpoint;
mod config;
mod forward;
mod mask;
mod params;

use std::path::PathBuf;

use thiserror::Error;

pub use cache::{argmax, KvCache};
pub use checkpoint::{load_params, save_params, Checkpoint};
pub use config::{count_params, LayerKind, LayerPattern, ModelConfig, NormGain, ParamCount};
pub use forward::{set_inference_window, LayerVars, ModelView, ParamVars};
pub use mask::{attention_mask, rope_apply, AttentionMask};
pub use params::{build_model, param_specs, Init, LayerParams, ModelParams, ParamSpec};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the context span of {span}")]
    ContextOverflow { len: usize, span: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("cache does not match model: {0}")]
    CacheMismatch(String),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
