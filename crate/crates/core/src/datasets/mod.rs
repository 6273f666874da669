//! Prompt families with controlled distractor count and cue position.
//!
//! A prompt is an optional instruction preamble, the distractor sentences
//! with the cue inserted at `cue_index`, an optional entity sentence and a
//! yes/no question. Each spec carries both questions of its pair.

mod corpus;
mod families;
mod partition;
mod toy;

pub use corpus::{sample_distractors, DistractorCorpus, DEFAULT_CORPUS};
pub use families::{
    gen_family, EntityRow, EntityTable, FactsRow, FactsTable, FamilyTable, DEFAULT_FACTS_TABLE,
    DEFAULT_GENDER_TABLE, DEFAULT_POLYSEMOUS_TABLE,
};
pub use partition::{select_partition, SliceAccuracy};
pub use toy::{gen_toy_slice, gen_toy_task, toy_examples, ToyTaskSpec};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Polysemous,
    Facts,
    Gender,
    Toy,
}

impl Family {
    pub fn preamble(self) -> &'static str {
        match self {
            Family::Polysemous | Family::Gender => "Please answer succinctly.",
            Family::Facts => "Answer based on the information provided here.",
            Family::Toy => "",
        }
    }

    /// String placed between consecutive prompt parts.
    pub fn joiner(self) -> &'static str {
        match self {
            Family::Toy => "",
            _ => " ",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Polysemous => "polysemous",
            Family::Facts => "facts",
            Family::Gender => "gender",
            Family::Toy => "toy",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "polysemous" => Ok(Family::Polysemous),
            "facts" => Ok(Family::Facts),
            "gender" => Ok(Family::Gender),
            "toy" => Ok(Family::Toy),
            other => Err(DataError::Parameter(format!("unknown family `{other}`"))),
        }
    }
}

/// Which question of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Yes,
    No,
}

impl Which {
    pub const BOTH: [Which; 2] = [Which::Yes, Which::No];

    /// The gold answer of this question: the yes-question's answer is yes.
    pub fn gold_is_yes(self) -> bool {
        self == Which::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Which::Yes => "yes",
            Which::No => "no",
        }
    }
}

/// Half-open byte range into a rendered prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// Byte spans of every role in one rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub preamble: Option<Span>,
    pub cue: Span,
    pub distractors: Vec<Span>,
    pub subject: Span,
    pub question: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub roles: Roles,
}

/// One entity/cue instance carrying both questions of its pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub family: Family,
    pub subject_entity: String,
    pub cue: String,
    pub question_yes: String,
    pub question_no: String,
    /// Sentence naming the entity before the question (e.g. "I see a bank.").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_sentence: Option<String>,
    pub preamble: String,
    pub distractors: Vec<String>,
    pub cue_index: usize,
    pub sample: u64,
    /// `(correct sense, incorrect sense)` labels when the table provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub senses: Option<(String, String)>,
    pub rendered_yes: String,
    pub rendered_no: String,
}

impl PromptSpec {
    /// Builds a spec and fills in both renderings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        family: Family,
        subject_entity: String,
        cue: String,
        question_yes: String,
        question_no: String,
        entity_sentence: Option<String>,
        distractors: Vec<String>,
        cue_index: usize,
        sample: u64,
        senses: Option<(String, String)>,
    ) -> Result<Self, DataError> {
        if cue_index > distractors.len() {
            return Err(DataError::Parameter(format!(
                "cue index {cue_index} exceeds distractor count {}",
                distractors.len()
            )));
        }
        let mut spec = Self {
            id,
            family,
            subject_entity,
            cue,
            question_yes,
            question_no,
            entity_sentence,
            preamble: family.preamble().to_string(),
            distractors,
            cue_index,
            sample,
            senses,
            rendered_yes: String::new(),
            rendered_no: String::new(),
        };
        spec.rerender()?;
        Ok(spec)
    }

    /// Replaces the preamble and re-renders.
    pub fn with_preamble(mut self, preamble: &str) -> Result<Self, DataError> {
        self.preamble = preamble.to_string();
        self.rerender()?;
        Ok(self)
    }

    fn rerender(&mut self) -> Result<(), DataError> {
        self.rendered_yes = render_prompt(self, Which::Yes)?.text;
        self.rendered_no = render_prompt(self, Which::No)?.text;
        Ok(())
    }

    pub fn question(&self, which: Which) -> &str {
        match which {
            Which::Yes => &self.question_yes,
            Which::No => &self.question_no,
        }
    }

    pub fn rendered(&self, which: Which) -> &str {
        match which {
            Which::Yes => &self.rendered_yes,
            Which::No => &self.rendered_no,
        }
    }

    pub fn n_distractors(&self) -> usize {
        self.distractors.len()
    }

    /// The same entity, cue and questions with no distractors.
    pub fn without_distractors(&self) -> Result<Self, DataError> {
        let mut clean = Self::new(
            format!("{}:clean", self.id),
            self.family,
            self.subject_entity.clone(),
            self.cue.clone(),
            self.question_yes.clone(),
            self.question_no.clone(),
            self.entity_sentence.clone(),
            Vec::new(),
            0,
            self.sample,
            self.senses.clone(),
        )?;
        if clean.preamble != self.preamble {
            clean = clean.with_preamble(&self.preamble)?;
        }
        Ok(clean)
    }

    pub fn roles(&self, which: Which) -> Result<Roles, DataError> {
        Ok(render_prompt(self, which)?.roles)
    }
}

/// Renders one question of `spec` and records where each role landed.
pub fn render_prompt(spec: &PromptSpec, which: Which) -> Result<RenderedPrompt, DataError> {
    if spec.cue_index > spec.distractors.len() {
        return Err(DataError::Parameter(format!(
            "cue index {} exceeds distractor count {}",
            spec.cue_index,
            spec.distractors.len()
        )));
    }
    let joiner = spec.family.joiner();
    let mut text = String::new();
    let mut push = |part: &str| -> Span {
        if !text.is_empty() {
            text.push_str(joiner);
        }
        let start = text.len();
        text.push_str(part);
        Span { start, end: text.len() }
    };

    let preamble = (!spec.preamble.is_empty()).then(|| push(&spec.preamble));
    let mut distractors = Vec::with_capacity(spec.distractors.len());
    let mut cue = None;
    for (i, d) in spec.distractors.iter().enumerate() {
        if i == spec.cue_index {
            cue = Some(push(&spec.cue));
        }
        distractors.push(push(d));
    }
    let cue = match cue {
        Some(c) => c,
        None => push(&spec.cue),
    };
    let entity = spec.entity_sentence.as_deref().map(&mut push);
    let question = push(spec.question(which));

    // The subject is the first mention of the entity in the entity sentence
    // plus question (a facts question also names the capital).
    let region = Span {
        start: entity.map_or(question.start, |e| e.start),
        end: question.end,
    };
    let offset = text[region.start..region.end]
        .find(spec.subject_entity.as_str())
        .ok_or_else(|| {
            DataError::Data(format!(
                "prompt `{}`: entity `{}` not found in question clause",
                spec.id, spec.subject_entity
            ))
        })?;
    let subject = Span {
        start: region.start + offset,
        end: region.start + offset + spec.subject_entity.len(),
    };
    Ok(RenderedPrompt {
        text,
        roles: Roles {
            preamble,
            cue,
            distractors,
            subject,
            question,
        },
    })
}

/// All prompts sharing one (distractor count, cue position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSlice {
    pub family: Family,
    pub n_distractors: usize,
    pub cue_position: usize,
    pub sample_seeds: Vec<u64>,
    pub prompts: Vec<PromptSpec>,
}

impl DatasetSlice {
    pub fn id(&self) -> String {
        slice_id(self.family, self.n_distractors, self.cue_position)
    }

    pub fn pair_count(&self) -> usize {
        self.prompts.len()
    }
}

pub fn slice_id(family: Family, n_distractors: usize, cue_position: usize) -> String {
    format!("{family}/d{n_distractors}c{cue_position}")
}

/// Every valid (distractor count, cue position) for counts in `range`.
pub fn slice_grid(range: std::ops::RangeInclusive<usize>) -> Vec<(usize, usize)> {
    range.flat_map(|n| (0..=n).map(move |c| (n, c))).collect()
}
