//! Declarative intervention plans compiled to model hooks: attention
//! ablation, residual patching, patch searches and open-ended
//! interpretation. Positions are 0-indexed token indices including BOS.

mod interpret;
mod search;

pub use interpret::{open_ended_interpret, placeholder_positions, Interpretation, InterpretationConfig};
pub use search::{
    backpatch_grid, backpatch_search, cross_patch_grid, cross_patch_search, noise_baseline, noise_grid, score_pair_with,
    CellOutcome, NoisePlan, NoiseScale, SearchKind, SearchResult,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DataError, PromptSpec, Which};
use crate::metrics::MetricError;
use crate::model::{AblationMode, AnswerTokens, ForwardTrace, Hook, HookSet, ModelConfig, ModelError, Tokenizer};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("plan error: {0}")]
    Plan(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Zero attention from every non-ablated position to the ablated ones, in
/// each layer of `layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub ablate: Vec<usize>,
    pub n_tokens: usize,
    pub layers: Range<usize>,
    #[serde(default)]
    pub mode: AblationMode,
}

impl AblationPlan {
    /// The complement of the ablated set.
    pub fn edit_positions(&self) -> Vec<usize> {
        (0..self.n_tokens).filter(|p| !self.ablate.contains(p)).collect()
    }
}

pub fn ablate_attention(plan: &AblationPlan, config: &ModelConfig) -> Result<HookSet, InterventionError> {
    if plan.layers.start > plan.layers.end || plan.layers.end > config.n_layers {
        return Err(InterventionError::Plan(format!(
            "layer block {:?} outside 0..{}",
            plan.layers, config.n_layers
        )));
    }
    if let Some(p) = plan.ablate.iter().find(|&&p| p >= plan.n_tokens) {
        return Err(InterventionError::Plan(format!(
            "ablated position {p} outside {} tokens",
            plan.n_tokens
        )));
    }
    let mut hooks = HookSet::new();
    if plan.ablate.is_empty() {
        return Ok(hooks);
    }
    let edit = plan.edit_positions();
    for layer in plan.layers.clone() {
        hooks.push(Hook::AttnProbs {
            layer,
            edit_rows: edit.clone(),
            ablate_cols: plan.ablate.clone(),
            mode: plan.mode,
        });
    }
    Ok(hooks)
}

/// Where a source representation is read: position `i` of `h_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLocator {
    pub position: usize,
    pub layer: usize,
}

/// Where it is written in the target run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLocator {
    pub positions: Vec<usize>,
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    #[default]
    Single,
    /// Hold the state fixed at every layer from the target layer up to the
    /// source layer. Source and target are the same prompt and position.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub source: SourceLocator,
    pub target: TargetLocator,
    pub mode: PatchMode,
}

/// Compiles a patch into residual writes using the state captured in
/// `source_trace`.
pub fn run_patch(plan: &PatchPlan, source_trace: &ForwardTrace<f32>) -> Result<HookSet, InterventionError> {
    let SourceLocator { position, layer } = plan.source;
    let h = source_trace
        .resid_at(layer, position)
        .ok_or_else(|| {
            InterventionError::Plan(format!(
                "no captured residual state at layer {layer}, position {position}"
            ))
        })?
        .to_vec();
    let mut hooks = HookSet::new();
    match plan.mode {
        PatchMode::Single => {
            for &p in &plan.target.positions {
                hooks.resid_write(plan.target.layer, p, h.clone());
            }
        }
        PatchMode::Frozen => {
            if plan.target.positions != [position] || plan.target.layer > layer {
                return Err(InterventionError::Plan(
                    "frozen patches need the source position as the only target and a target layer at or below the source layer".into(),
                ));
            }
            for l in plan.target.layer..=layer {
                hooks.resid_write(l, position, h.clone());
            }
        }
    }
    Ok(hooks)
}

/// Token indices of each role in one rendered question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleIndices {
    pub preamble: Vec<usize>,
    pub cue: Vec<usize>,
    pub distractors: Vec<usize>,
    /// Last token of the subject entity.
    pub subject: usize,
    pub question: Vec<usize>,
}

/// One question of a pair, tokenized with its roles resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedQuestion {
    pub which: Which,
    pub ids: Vec<u32>,
    pub roles: RoleIndices,
    pub answers: AnswerTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedPair {
    pub pair_id: String,
    pub yes: PreparedQuestion,
    pub no: PreparedQuestion,
}

impl PreparedPair {
    pub fn new(spec: &PromptSpec, tokenizer: &Tokenizer) -> Result<Self, InterventionError> {
        let prep = |which: Which| -> Result<PreparedQuestion, InterventionError> {
            let roles = spec.roles(which)?;
            let seq = tokenizer.tokenize(spec.rendered(which))?;
            let toks = |s: crate::datasets::Span| seq.tokens_in_span(s.start, s.end);
            let subject = seq
                .last_token_of_span(roles.subject.start, roles.subject.end)
                .ok_or_else(|| {
                    InterventionError::Alignment(format!("subject of `{}` has no tokens", spec.id))
                })?;
            Ok(PreparedQuestion {
                which,
                answers: AnswerTokens::at_end(tokenizer, &seq)?,
                roles: RoleIndices {
                    preamble: roles.preamble.map(toks).unwrap_or_default(),
                    cue: toks(roles.cue),
                    distractors: roles.distractors.iter().flat_map(|&s| toks(s)).collect(),
                    subject,
                    question: toks(roles.question),
                },
                ids: seq.ids,
            })
        };
        Ok(Self {
            pair_id: spec.id.clone(),
            yes: prep(Which::Yes)?,
            no: prep(Which::No)?,
        })
    }

    pub fn question(&self, which: Which) -> &PreparedQuestion {
        match which {
            Which::Yes => &self.yes,
            Which::No => &self.no,
        }
    }
}

/// Even layers `0, 2, ..` up to and including `max`.
pub fn even_layers(max: usize) -> Vec<usize> {
    (0..=max).step_by(2).collect()
}
