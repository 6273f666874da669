use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};

/// How an attention ablation removes entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Zero post-softmax probabilities, then renormalise each edited row.
    #[default]
    Renormalize,
    /// Mask scores to `-inf` before the softmax.
    PreSoftmaxMask,
}

/// A single intervention applied during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "site", rename_all = "snake_case")]
pub enum Hook {
    /// Edits the attention probabilities of every head in `layer`: for rows in
    /// `edit_rows`, entries at `ablate_cols` are removed.
    AttnProbs {
        layer: usize,
        edit_rows: Vec<usize>,
        ablate_cols: Vec<usize>,
        #[serde(default)]
        mode: AblationMode,
    },
    /// Replaces the residual state `h_layer` at `position` with `value`.
    /// `layer` ranges over `0..=L`; `h_0` is the embedding output.
    ResidWrite {
        layer: usize,
        position: usize,
        value: Vec<f32>,
    },
}

impl Hook {
    pub fn layer(&self) -> usize {
        match self {
            Hook::AttnProbs { layer, .. } | Hook::ResidWrite { layer, .. } => *layer,
        }
    }
}

/// Ordered collection of hooks owned by one forward pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HookSet {
    hooks: Vec<Hook>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn hooks(&self) -> &[Hook] {
        &self.hooks
    }

    pub fn push(&mut self, hook: Hook) -> &mut Self {
        self.hooks.push(hook);
        self
    }

    pub fn extend(&mut self, other: HookSet) -> &mut Self {
        self.hooks.extend(other.hooks);
        self
    }

    pub fn resid_write(&mut self, layer: usize, position: usize, value: Vec<f32>) -> &mut Self {
        self.push(Hook::ResidWrite {
            layer,
            position,
            value,
        })
    }

    pub(crate) fn resid_writes_at(&self, layer: usize) -> impl Iterator<Item = (usize, &[f32])> {
        self.hooks.iter().filter_map(move |h| match h {
            Hook::ResidWrite {
                layer: l,
                position,
                value,
            } if *l == layer => Some((*position, value.as_slice())),
            _ => None,
        })
    }

    pub(crate) fn attn_edits_at(
        &self,
        layer: usize,
    ) -> impl Iterator<Item = (&[usize], &[usize], AblationMode)> {
        self.hooks.iter().filter_map(move |h| match h {
            Hook::AttnProbs {
                layer: l,
                edit_rows,
                ablate_cols,
                mode,
            } if *l == layer => Some((edit_rows.as_slice(), ablate_cols.as_slice(), *mode)),
            _ => None,
        })
    }

    /// Checks every hook against the model shape and a sequence of `n_tokens`.
    pub fn validate(&self, config: &ModelConfig, n_tokens: usize) -> Result<(), ModelError> {
        let mut writes: Vec<(usize, usize)> = Vec::new();
        for (i, hook) in self.hooks.iter().enumerate() {
            match hook {
                Hook::AttnProbs {
                    layer,
                    edit_rows,
                    ablate_cols,
                    ..
                } => {
                    if *layer >= config.n_layers {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: attention layer {layer} out of range 0..{}",
                            config.n_layers
                        )));
                    }
                    if let Some(p) = edit_rows.iter().chain(ablate_cols).find(|&&p| p >= n_tokens) {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: position {p} outside sequence of {n_tokens} tokens"
                        )));
                    }
                }
                Hook::ResidWrite {
                    layer,
                    position,
                    value,
                } => {
                    if *layer > config.n_layers {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: residual layer {layer} out of range 0..={}",
                            config.n_layers
                        )));
                    }
                    if *position >= n_tokens {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: position {position} outside sequence of {n_tokens} tokens"
                        )));
                    }
                    if value.len() != config.d_model {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: write of width {} into d_model {}",
                            value.len(),
                            config.d_model
                        )));
                    }
                    if value.iter().any(|v| !v.is_finite()) {
                        return Err(ModelError::Plan(format!("hook {i}: non-finite write")));
                    }
                    if writes.contains(&(*layer, *position)) {
                        return Err(ModelError::Plan(format!(
                            "hook {i}: second residual write at layer {layer}, position {position}"
                        )));
                    }
                    writes.push((*layer, *position));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.n_layers = 2;
        c
    }

    #[test]
    fn out_of_range_sites_rejected() {
        let c = cfg();
        let mut h = HookSet::new();
        h.push(Hook::AttnProbs {
            layer: 2,
            edit_rows: vec![],
            ablate_cols: vec![],
            mode: AblationMode::Renormalize,
        });
        assert!(h.validate(&c, 4).is_err());

        let mut h = HookSet::new();
        h.resid_write(3, 0, vec![0.0; c.d_model]);
        assert!(h.validate(&c, 4).is_err());

        let mut h = HookSet::new();
        h.resid_write(2, 4, vec![0.0; c.d_model]);
        assert!(h.validate(&c, 4).is_err());
        assert!(h.validate(&c, 5).is_ok());
    }

    #[test]
    fn duplicate_write_rejected() {
        let c = cfg();
        let mut h = HookSet::new();
        h.resid_write(1, 0, vec![0.0; c.d_model]);
        h.resid_write(1, 0, vec![1.0; c.d_model]);
        assert!(matches!(h.validate(&c, 3), Err(ModelError::Plan(_))));
    }

    #[test]
    fn serde_shape_is_tagged() {
        let mut h = HookSet::new();
        h.resid_write(1, 2, vec![0.5]);
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("\"site\":\"resid_write\""), "{s}");
    }
}
