use serde::{Deserialize, Serialize};

use crate::datasets::{PromptSpec, Which};
use crate::model::{forward, greedy_decode, Capture, HookSet, ModelParams, Tokenizer};

use super::{even_layers, InterventionError, PreparedPair};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretationConfig {
    pub target_prompt: String,
    /// Substring of `target_prompt` whose occurrences receive the patch.
    pub placeholder: String,
    pub target_layer: usize,
    /// Appended after the target prompt, separated by a space.
    pub conditioning: String,
    pub gen_len: usize,
}

impl Default for InterpretationConfig {
    fn default() -> Self {
        Self {
            target_prompt: "Tell me about X X X".into(),
            placeholder: "X".into(),
            target_layer: 3,
            conditioning: "Sure! In this context, the word refers to".into(),
            gen_len: 15,
        }
    }
}

impl InterpretationConfig {
    pub fn full_prompt(&self) -> String {
        if self.conditioning.is_empty() {
            self.target_prompt.clone()
        } else {
            format!("{} {}", self.target_prompt, self.conditioning)
        }
    }
}

/// Token indices of the placeholder occurrences in the full target prompt.
/// Each occurrence must be exactly one token.
pub fn placeholder_positions(
    config: &InterpretationConfig,
    tokenizer: &Tokenizer,
) -> Result<(Vec<u32>, Vec<usize>), InterventionError> {
    if config.placeholder.is_empty() || config.gen_len == 0 {
        return Err(InterventionError::Config(
            "interpretation needs a placeholder and gen_len >= 1".into(),
        ));
    }
    let text = config.full_prompt();
    let seq = tokenizer.tokenize(&text)?;
    let mut positions = Vec::new();
    for (start, _) in config.target_prompt.match_indices(config.placeholder.as_str()) {
        let end = start + config.placeholder.len();
        let toks = seq.tokens_in_span(start, end);
        let exact = toks.len() == 1 && seq.offsets[toks[0]] == Some((start, end));
        if !exact {
            let bounds: Vec<String> = toks
                .iter()
                .filter_map(|&t| seq.offsets[t].map(|(s, e)| format!("{t}:{s}..{e}")))
                .collect();
            return Err(InterventionError::Config(format!(
                "placeholder at bytes {start}..{end} is not a single token; overlapping tokens [{}]",
                bounds.join(", ")
            )));
        }
        positions.push(toks[0]);
    }
    if positions.is_empty() {
        return Err(InterventionError::Config(format!(
            "placeholder `{}` not found in target prompt",
            config.placeholder
        )));
    }
    Ok((seq.ids, positions))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpretation {
    pub layer: usize,
    pub tokens: Vec<u32>,
    pub text: String,
}

/// For each even source layer, writes the subject state into every
/// placeholder of the target prompt at `target_layer` and decodes greedily.
pub fn open_ended_interpret(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    spec: &PromptSpec,
    which: Which,
    config: &InterpretationConfig,
) -> Result<Vec<Interpretation>, InterventionError> {
    if config.target_layer > params.config.n_layers {
        return Err(InterventionError::Config(format!(
            "target layer {} exceeds model depth {}",
            config.target_layer, params.config.n_layers
        )));
    }
    let (target, positions) = placeholder_positions(config, tokenizer)?;
    let pair = PreparedPair::new(spec, tokenizer)?;
    let q = pair.question(which);
    let trace = forward(params, &q.ids, &HookSet::new(), Capture::RESID)?;
    even_layers(params.config.n_layers)
        .into_iter()
        .map(|l| {
            let h = trace.resid_at(l, q.roles.subject).expect("captured").to_vec();
            let mut hooks = HookSet::new();
            for &p in &positions {
                hooks.resid_write(config.target_layer, p, h.clone());
            }
            let tokens = greedy_decode(params, &target, config.gen_len, &hooks)?;
            let text = tokenizer.detokenize(&tokens).unwrap_or_default();
            Ok(Interpretation { layer: l, tokens, text })
        })
        .collect()
}
