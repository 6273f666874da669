//! Attention mass, logit lens, question-pair scoring and interpretation
//! scoring. Token positions are 0-indexed.

mod autoscore;
mod scoring;

pub use autoscore::{
    autoscore_interpretation, autoscore_prompt, parse_yes_no, Provenance, Scorer, ScorerError, SenseKeywords,
    Verdict,
};
pub use scoring::{
    chance_pair_accuracy, cumulative_accuracy, score_generated, score_logits, score_pair, score_question,
    PairOutcome, QuestionOutcome, ScoreMode, MAX_ANSWER_TOKENS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Which;
use crate::model::{lens_logits, AnswerTokens, ForwardTrace, ModelError, Params};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("range error: {0}")]
    Range(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Attention paid to position `s` at `layer` by every later position, summed
/// over heads. With `normalize` the head sum becomes a mean.
pub fn attention_mass<T: Scalar>(
    trace: &ForwardTrace<T>,
    s: usize,
    layer: usize,
    normalize: bool,
) -> Result<f64, MetricError> {
    let attn = trace
        .attn
        .get(layer)
        .ok_or_else(|| MetricError::Range(format!("no captured attention for layer {layer}")))?;
    let (heads, n) = (attn.shape()[0], attn.shape()[1]);
    if s >= n {
        return Err(MetricError::Range(format!("subject position {s} outside {n} tokens")));
    }
    let mut mass = 0.0f64;
    for h in 0..heads {
        for dest in s + 1..n {
            mass += attn.at(&[h, dest, s]).as_f64();
        }
    }
    Ok(if normalize { mass / heads as f64 } else { mass })
}

/// `W_U[yes] · norm(h) - W_U[no] · norm(h)`.
pub fn log_odds<T: Scalar>(h: &[T], params: &Params<T>, answers: &AnswerTokens) -> f64 {
    let logits = lens_logits(params, h);
    (logits[answers.yes_id as usize] - logits[answers.no_id as usize]).as_f64()
}

/// Log-odds of the answer-position state at every layer `0..=L`.
pub fn lens_trajectory<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &Params<T>,
    answers: &AnswerTokens,
) -> Result<Vec<f64>, MetricError> {
    if trace.resid.len() != params.config.n_layers + 1 {
        return Err(MetricError::Range("residual stream was not captured".into()));
    }
    (0..=params.config.n_layers)
        .map(|l| {
            trace
                .resid_at(l, answers.answer_position)
                .map(|h| log_odds(h, params, answers))
                .ok_or_else(|| MetricError::Range(format!("answer position {} out of range", answers.answer_position)))
        })
        .collect()
}

/// Per-layer log-odds of one question's final-token states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTrajectory {
    pub question_id: String,
    pub which: Which,
    pub correct: bool,
    pub values: Vec<f64>,
}

/// Trajectories split by gold answer and then by correctness.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPartition {
    pub yes_correct: Vec<LensTrajectory>,
    pub yes_incorrect: Vec<LensTrajectory>,
    pub no_correct: Vec<LensTrajectory>,
    pub no_incorrect: Vec<LensTrajectory>,
}

impl EvalPartition {
    pub fn new(trajectories: Vec<LensTrajectory>) -> Self {
        let mut p = Self::default();
        for t in trajectories {
            match (t.which, t.correct) {
                (Which::Yes, true) => p.yes_correct.push(t),
                (Which::Yes, false) => p.yes_incorrect.push(t),
                (Which::No, true) => p.no_correct.push(t),
                (Which::No, false) => p.no_incorrect.push(t),
            }
        }
        p
    }
}

fn mean_at(set: &[LensTrajectory], l: usize) -> Option<f64> {
    let vals: Vec<f64> = set.iter().filter_map(|t| t.values.get(l).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `(diff_y, diff_n)` at layer `l`: mean log-odds of correct minus incorrect
/// trajectories for each gold answer. `None` where a subset is empty.
pub fn lens_separation(partition: &EvalPartition, l: usize) -> (Option<f64>, Option<f64>) {
    let diff = |plus: &[LensTrajectory], minus: &[LensTrajectory]| Some(mean_at(plus, l)? - mean_at(minus, l)?);
    (
        diff(&partition.yes_correct, &partition.yes_incorrect),
        diff(&partition.no_correct, &partition.no_incorrect),
    )
}

/// Earliest layer whose |diff| exceeds `fraction` of the terminal |diff|.
/// A heuristic reading of where the answer becomes identifiable.
pub fn identifiable_layer(diffs: &[Option<f64>], fraction: f64) -> Option<usize> {
    let terminal = diffs.last().copied().flatten()?.abs();
    diffs
        .iter()
        .position(|d| d.is_some_and(|d| d.abs() > fraction * terminal))
}

#[cfg(test)]
mod tests;
