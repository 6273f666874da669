//! Instrumented decoder-only transformer.
//!
//! Pre-norm RMS blocks with rotary positions and a causal mask. The forward
//! pass exposes two hook sites: post-softmax attention probabilities and the
//! residual stream between blocks. Positions are 0-indexed here.

pub mod config;
mod forward;
mod hooks;
mod params;
pub mod tokenizer;
mod weights;

pub use config::{ModelConfig, Positional};
pub use forward::{
    answer_logit_pair, argmax, forward, greedy_decode, lens_logits, AnswerTokens, Capture,
    DegenerateRow, ForwardTrace,
};
pub(crate) use forward::{check_tokens, gather_head, scatter_head};
pub use hooks::{AblationMode, Hook, HookSet};
pub use params::{tensor_shapes, LayerParams, ModelParams, Params};
pub use tokenizer::{TokenSequence, TokenTable, Tokenizer};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("tokenize error: {0}")]
    Tokenize(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
