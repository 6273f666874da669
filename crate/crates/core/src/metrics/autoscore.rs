use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer unreachable: {0}")]
    Unreachable(String),
    #[error("scorer reply unusable: {0}")]
    Reply(String),
}

/// A yes/no judge for autoscoring prompts.
pub trait Scorer {
    fn ask(&self, prompt: &str) -> Result<String, ScorerError>;
}

/// Renders the autoscoring question for one sense.
pub fn autoscore_prompt(generation: &str, sense: &str) -> String {
    format!(
        "Consider the following description: {generation}\n\
         Is this description referring to {sense}?\n\
         Please answer with yes or no:"
    )
}

/// `Some(true)` for a reply starting with "yes", `Some(false)` for "no".
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Keywords whose presence marks a sense as mentioned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseKeywords {
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
    #[serde(default)]
    pub case_sensitive: bool,
}

impl SenseKeywords {
    /// Each sense label is its own single keyword, matched case-insensitively.
    pub fn from_senses(correct: &str, incorrect: &str) -> Self {
        Self {
            correct: vec![correct.to_string()],
            incorrect: vec![incorrect.to_string()],
            case_sensitive: false,
        }
    }

    fn mentions(&self, text: &str, keywords: &[String]) -> bool {
        if self.case_sensitive {
            keywords.iter().any(|k| text.contains(k.as_str()))
        } else {
            let text = text.to_lowercase();
            keywords.iter().any(|k| text.contains(&k.to_lowercase()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Offline,
    External,
    /// The external scorer failed and the offline scorer decided.
    FallbackOffline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub yes_on_correct: bool,
    pub yes_on_incorrect: bool,
    /// Yes for the correct sense and no for the incorrect one.
    pub correct: bool,
    pub provenance: Provenance,
}

impl Verdict {
    fn new(yes_on_correct: bool, yes_on_incorrect: bool, provenance: Provenance) -> Self {
        Self {
            yes_on_correct,
            yes_on_incorrect,
            correct: yes_on_correct && !yes_on_incorrect,
            provenance,
        }
    }
}

/// Judges whether `text` describes the correct sense and not the incorrect
/// one, asking `scorer` when given and keyword containment otherwise.
pub fn autoscore_interpretation(
    text: &str,
    correct_sense: &str,
    incorrect_sense: &str,
    keywords: &SenseKeywords,
    scorer: Option<&dyn Scorer>,
) -> Verdict {
    if let Some(scorer) = scorer {
        let ask = |sense: &str| -> Result<bool, ScorerError> {
            let reply = scorer.ask(&autoscore_prompt(text, sense))?;
            parse_yes_no(&reply).ok_or_else(|| ScorerError::Reply(reply))
        };
        match (ask(correct_sense), ask(incorrect_sense)) {
            (Ok(a), Ok(b)) => return Verdict::new(a, b, Provenance::External),
            _ => {
                return Verdict::new(
                    keywords.mentions(text, &keywords.correct),
                    keywords.mentions(text, &keywords.incorrect),
                    Provenance::FallbackOffline,
                )
            }
        }
    }
    Verdict::new(
        keywords.mentions(text, &keywords.correct),
        keywords.mentions(text, &keywords.incorrect),
        Provenance::Offline,
    )
}
