use serde::{Deserialize, Serialize};

use crate::datasets::Which;
use crate::model::{answer_logit_pair, forward, greedy_decode, AnswerTokens, Capture, HookSet, Params, Tokenizer};
use crate::tensor::RngStream;

use super::MetricError;

/// Tokens decoded in generation mode.
pub const MAX_ANSWER_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Logit,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub pair_id: String,
    pub which: Which,
    /// `Some(true)` when the model answered yes; `None` when it abstained.
    pub answered_yes: Option<bool>,
    pub correct: bool,
}

impl QuestionOutcome {
    fn new(pair_id: &str, which: Which, answered_yes: Option<bool>) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            which,
            answered_yes,
            correct: answered_yes == Some(which.gold_is_yes()),
        }
    }

    pub fn abstained(&self) -> bool {
        self.answered_yes.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pair_id: String,
    pub yes: QuestionOutcome,
    pub no: QuestionOutcome,
    pub pair_correct: bool,
}

/// Logit mode: the larger of the yes and no logits is the answer. Ties count
/// as no.
pub fn score_logits(pair_id: &str, which: Which, yes_logit: f64, no_logit: f64) -> QuestionOutcome {
    QuestionOutcome::new(pair_id, which, Some(yes_logit > no_logit))
}

/// Generation mode: the first yes/no answer token, or the first standalone
/// "yes"/"no" word of the decoded text, decides.
pub fn score_generated(pair_id: &str, which: Which, ids: &[u32], tokenizer: &Tokenizer) -> QuestionOutcome {
    let (yes, no) = (tokenizer.yes(), tokenizer.no());
    let mut text = String::new();
    for &id in ids {
        if Some(id) == yes {
            text.push_str(" yes ");
        } else if Some(id) == no {
            text.push_str(" no ");
        } else if let Ok(bytes) = tokenizer.detokenize_bytes(&[id]) {
            text.push_str(&String::from_utf8_lossy(&bytes));
        }
    }
    let answer = text
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| match w.to_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        });
    QuestionOutcome::new(pair_id, which, answer)
}

/// Scores one question of a pair in the requested mode.
#[allow(clippy::too_many_arguments)]
pub fn score_question(
    params: &Params<f32>,
    tokenizer: &Tokenizer,
    ids: &[u32],
    answers: &AnswerTokens,
    pair_id: &str,
    which: Which,
    mode: ScoreMode,
    hooks: &HookSet,
) -> Result<QuestionOutcome, MetricError> {
    match mode {
        ScoreMode::Logit => {
            let trace = forward(params, ids, hooks, Capture::NONE)?;
            let (y, n) = answer_logit_pair(&trace, answers);
            Ok(score_logits(pair_id, which, y as f64, n as f64))
        }
        ScoreMode::Generation => {
            let k = MAX_ANSWER_TOKENS.min(params.config.max_seq.saturating_sub(ids.len())).max(1);
            let generated = greedy_decode(params, ids, k, hooks)?;
            Ok(score_generated(pair_id, which, &generated, tokenizer))
        }
    }
}

/// A pair is correct only when both of its questions are.
pub fn score_pair(yes: QuestionOutcome, no: QuestionOutcome) -> Result<PairOutcome, MetricError> {
    if yes.pair_id != no.pair_id {
        return Err(MetricError::Pairing(format!(
            "questions belong to different pairs: `{}` and `{}`",
            yes.pair_id, no.pair_id
        )));
    }
    if yes.which != Which::Yes || no.which != Which::No {
        return Err(MetricError::Pairing(format!(
            "pair `{}` needs one yes-question and one no-question",
            yes.pair_id
        )));
    }
    Ok(PairOutcome {
        pair_id: yes.pair_id.clone(),
        pair_correct: yes.correct && no.correct,
        yes,
        no,
    })
}

/// Pair accuracy of a guesser answering yes or no uniformly at random.
pub fn chance_pair_accuracy(pairs: usize, rng: &mut RngStream) -> f64 {
    let mut hits = 0usize;
    for i in 0..pairs {
        let id = i.to_string();
        let y = QuestionOutcome::new(&id, Which::Yes, Some(rng.uniform() < 0.5));
        let n = QuestionOutcome::new(&id, Which::No, Some(rng.uniform() < 0.5));
        if score_pair(y, n).map(|p| p.pair_correct).unwrap_or(false) {
            hits += 1;
        }
    }
    hits as f64 / pairs.max(1) as f64
}

/// Cumulative accuracy over a layer grid. `items[i][part][m]` is the verdict
/// for one part (e.g. one question of a pair) of item `i` at grid index `m`.
/// An item counts at `m` once every part has succeeded at some index `<= m`.
pub fn cumulative_accuracy(items: &[Vec<Vec<bool>>]) -> Vec<f64> {
    let len = items
        .iter()
        .flat_map(|parts| parts.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut curve = vec![0.0; len];
    if items.is_empty() {
        return curve;
    }
    for parts in items {
        let mut seen = vec![false; parts.len()];
        for (m, slot) in curve.iter_mut().enumerate() {
            for (s, verdicts) in seen.iter_mut().zip(parts) {
                *s |= verdicts.get(m).copied().unwrap_or(false);
            }
            if !parts.is_empty() && seen.iter().all(|&s| s) {
                *slot += 1.0;
            }
        }
    }
    curve.iter_mut().for_each(|c| *c /= items.len() as f64);
    curve
}
