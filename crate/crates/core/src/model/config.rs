use serde::{Deserialize, Serialize};

use super::ModelError;

/// Positional scheme. Only rotary is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Rotary,
}

/// Shape of a pre-norm RMS decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: u32,
    #[serde(default)]
    pub positional: Positional,
}

fn default_rope_base() -> u32 {
    10_000
}

/// Epsilon inside every RMS norm.
pub const NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    /// The bundled toy model.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size: super::tokenizer::BYTE_VOCAB_SIZE,
            max_seq: 96,
            rope_base: 10_000,
            positional: Positional::Rotary,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers < 1 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads < 1 {
            return bad("n_heads must be at least 1".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary positions", self.d_head));
        }
        if self.max_seq < 2 {
            return bad("max_seq must be at least 2".into());
        }
        if self.vocab_size < 2 || self.d_mlp < 1 {
            return bad("vocab_size and d_mlp must be positive".into());
        }
        if self.rope_base < 2 {
            return bad("rope_base must be at least 2".into());
        }
        Ok(())
    }

    /// Named integer fields as stored in weight files, in file order.
    pub fn to_fields(&self) -> Vec<(&'static str, i64)> {
        vec![
            ("n_layers", self.n_layers as i64),
            ("n_heads", self.n_heads as i64),
            ("d_model", self.d_model as i64),
            ("d_head", self.d_head as i64),
            ("d_mlp", self.d_mlp as i64),
            ("vocab_size", self.vocab_size as i64),
            ("max_seq", self.max_seq as i64),
            ("rope_base", self.rope_base as i64),
        ]
    }

    pub fn from_fields(fields: &[(String, i64)]) -> Result<Self, ModelError> {
        let get = |name: &str| -> Result<usize, ModelError> {
            let v = fields
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| ModelError::Format(format!("config field `{name}` missing")))?;
            usize::try_from(v)
                .map_err(|_| ModelError::Format(format!("config field `{name}` is negative: {v}")))
        };
        let config = Self {
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            d_model: get("d_model")?,
            d_head: get("d_head")?,
            d_mlp: get("d_mlp")?,
            vocab_size: get("vocab_size")?,
            max_seq: get("max_seq")?,
            rope_base: u32::try_from(get("rope_base")?)
                .map_err(|_| ModelError::Format("config field `rope_base` out of range".into()))?,
            positional: Positional::Rotary,
        };
        config
            .validate()
            .map_err(|e| ModelError::Format(format!("config block invalid: {e}")))?;
        Ok(config)
    }
}
