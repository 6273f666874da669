use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{stream_label, RngStream};

use super::{sample_distractors, DataError, DatasetSlice, DistractorCorpus, Family, PromptSpec};

pub const DEFAULT_POLYSEMOUS_TABLE: &str = include_str!("../../data/polysemous.tsv");
pub const DEFAULT_GENDER_TABLE: &str = include_str!("../../data/gender.tsv");
pub const DEFAULT_FACTS_TABLE: &str = include_str!("../../data/facts.tsv");

const ENTITY_HEADER: [&str; 8] = [
    "entity",
    "entity_sentence",
    "cue_a",
    "cue_b",
    "question_a",
    "question_b",
    "sense_a",
    "sense_b",
];
const FACTS_HEADER: [&str; 2] = ["country", "capital"];

/// One subject entity with two cues. `question_a` is the yes-question under
/// `cue_a` and the no-question under `cue_b`, and vice versa.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRow {
    pub entity: String,
    pub entity_sentence: Option<String>,
    pub cue_a: String,
    pub cue_b: String,
    pub question_a: String,
    pub question_b: String,
    pub sense_a: String,
    pub sense_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTable {
    pub rows: Vec<EntityRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactsRow {
    pub country: String,
    pub capital: String,
}

/// Countries and their capitals. Each country gets `alternatives` cues, each
/// renaming its capital to another row's capital, chosen with `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactsTable {
    pub rows: Vec<FactsRow>,
    pub alternatives: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyTable {
    Entity(EntityTable),
    Facts(FactsTable),
}

fn parse_tsv<'a>(content: &'a str, header: &[&str]) -> Result<Vec<(usize, Vec<&'a str>)>, DataError> {
    let mut lines = content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hrow, hline) = lines.next().ok_or_else(|| DataError::Data("table is empty".into()))?;
    let got: Vec<&str> = hline.split('\t').map(str::trim).collect();
    if got != header {
        return Err(DataError::Schema {
            row: hrow + 1,
            message: format!("expected header `{}`, found `{}`", header.join("\\t"), got.join("\\t")),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != header.len() {
            return Err(DataError::Schema {
                row: i + 1,
                message: format!("expected {} columns, found {}", header.len(), cols.len()),
            });
        }
        rows.push((i + 1, cols));
    }
    if rows.is_empty() {
        return Err(DataError::Data("table has no rows".into()));
    }
    Ok(rows)
}

impl EntityTable {
    pub fn parse(content: &str) -> Result<Self, DataError> {
        let mut rows = Vec::new();
        for (row, c) in parse_tsv(content, &ENTITY_HEADER)? {
            let required = [0, 2, 3, 4, 5];
            if let Some(&k) = required.iter().find(|&&k| c[k].is_empty()) {
                return Err(DataError::Schema {
                    row,
                    message: format!("column `{}` is empty", ENTITY_HEADER[k]),
                });
            }
            let entity = c[0].to_string();
            let entity_sentence = (!c[1].is_empty()).then(|| c[1].to_string());
            let clause_has_entity = |q: &str| {
                entity_sentence.as_deref().is_some_and(|s| s.contains(&entity)) || q.contains(&entity)
            };
            if !clause_has_entity(c[4]) || !clause_has_entity(c[5]) {
                return Err(DataError::Schema {
                    row,
                    message: format!("entity `{entity}` missing from entity sentence and question"),
                });
            }
            rows.push(EntityRow {
                entity,
                entity_sentence,
                cue_a: c[2].to_string(),
                cue_b: c[3].to_string(),
                question_a: c[4].to_string(),
                question_b: c[5].to_string(),
                sense_a: c[6].to_string(),
                sense_b: c[7].to_string(),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl FactsTable {
    pub fn parse(content: &str, alternatives: usize, seed: u64) -> Result<Self, DataError> {
        let rows: Vec<FactsRow> = parse_tsv(content, &FACTS_HEADER)?
            .into_iter()
            .map(|(_, c)| FactsRow {
                country: c[0].to_string(),
                capital: c[1].to_string(),
            })
            .collect();
        if alternatives >= rows.len() {
            return Err(DataError::Parameter(format!(
                "{alternatives} alternatives need more than {} countries",
                rows.len()
            )));
        }
        Ok(Self { rows, alternatives, seed })
    }

    pub fn load(path: &Path, alternatives: usize, seed: u64) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?, alternatives, seed)
    }

    /// `(row index, new capital)` for every cue, in table order.
    pub fn renamings(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let mut rng = RngStream::new(self.seed, stream_label(&format!("facts/rename/{}", row.country)));
            let mut others: Vec<usize> = (0..self.rows.len()).filter(|&j| j != i).collect();
            for k in 0..self.alternatives {
                let j = k + rng.below(others.len() - k);
                others.swap(k, j);
                out.push((i, self.rows[others[k]].capital.clone()));
            }
        }
        out
    }
}

impl FamilyTable {
    /// The table shipped with the crate. Facts uses two alternatives per country.
    pub fn bundled(family: Family) -> Result<Self, DataError> {
        match family {
            Family::Polysemous => Ok(Self::Entity(EntityTable::parse(DEFAULT_POLYSEMOUS_TABLE)?)),
            Family::Gender => Ok(Self::Entity(EntityTable::parse(DEFAULT_GENDER_TABLE)?)),
            Family::Facts => Ok(Self::Facts(FactsTable::parse(DEFAULT_FACTS_TABLE, 2, 0)?)),
            Family::Toy => Err(DataError::Parameter("the toy family has no entity table".into())),
        }
    }

    fn instances(&self) -> Vec<Instance> {
        match self {
            Self::Entity(t) => t
                .rows
                .iter()
                .flat_map(|r| {
                    let a = Instance {
                        key: format!("{}/a", r.entity),
                        entity: r.entity.clone(),
                        entity_sentence: r.entity_sentence.clone(),
                        cue: r.cue_a.clone(),
                        question_yes: r.question_a.clone(),
                        question_no: r.question_b.clone(),
                        senses: Some((r.sense_a.clone(), r.sense_b.clone())),
                    };
                    let b = Instance {
                        key: format!("{}/b", r.entity),
                        cue: r.cue_b.clone(),
                        question_yes: r.question_b.clone(),
                        question_no: r.question_a.clone(),
                        senses: Some((r.sense_b.clone(), r.sense_a.clone())),
                        ..a.clone()
                    };
                    [a, b]
                })
                .collect(),
            Self::Facts(t) => t
                .renamings()
                .into_iter()
                .map(|(i, new)| {
                    let FactsRow { country, capital } = &t.rows[i];
                    Instance {
                        key: format!("{country}/{new}"),
                        entity: country.clone(),
                        entity_sentence: None,
                        cue: format!(
                            "Forget everything you know about geography. \
                             The capital city of {country} was just renamed from {capital} to {new}."
                        ),
                        question_yes: format!("Is the capital city of {country} named {new}?"),
                        question_no: format!("Is the capital city of {country} named {capital}?"),
                        senses: Some((new.clone(), capital.clone())),
                    }
                })
                .collect(),
        }
    }

    /// Number of (entity, cue) combinations.
    pub fn cue_count(&self) -> usize {
        match self {
            Self::Entity(t) => 2 * t.rows.len(),
            Self::Facts(t) => t.rows.len() * t.alternatives,
        }
    }
}

#[derive(Debug, Clone)]
struct Instance {
    key: String,
    entity: String,
    entity_sentence: Option<String>,
    cue: String,
    question_yes: String,
    question_no: String,
    senses: Option<(String, String)>,
}

/// One prompt pair per (entity, cue, sample seed). Distractors depend on the
/// entity-cue, the sample seed and the count, but not on the cue position, so
/// slices that differ only in cue position share their distractor sentences.
pub fn gen_family(
    family: Family,
    table: &FamilyTable,
    n_distractors: usize,
    cue_position: usize,
    corpus: &DistractorCorpus,
    seeds: &[u64],
) -> Result<DatasetSlice, DataError> {
    if cue_position > n_distractors {
        return Err(DataError::Parameter(format!(
            "cue position {cue_position} exceeds distractor count {n_distractors}"
        )));
    }
    if corpus.is_empty() {
        return Err(DataError::Data(format!("distractor corpus `{}` is empty", corpus.source)));
    }
    if family == Family::Toy {
        return Err(DataError::Parameter("use gen_toy_slice for the toy family".into()));
    }
    let mut prompts = Vec::new();
    for inst in table.instances() {
        for (s, &seed) in seeds.iter().enumerate() {
            let mut rng = RngStream::new(seed, stream_label(&format!("{family}/{}/n{n_distractors}", inst.key)));
            let distractors = sample_distractors(corpus, n_distractors, &mut rng)?;
            prompts.push(PromptSpec::new(
                format!("{family}/d{n_distractors}c{cue_position}/{}/s{s}", inst.key),
                family,
                inst.entity.clone(),
                inst.cue.clone(),
                inst.question_yes.clone(),
                inst.question_no.clone(),
                inst.entity_sentence.clone(),
                distractors,
                cue_position,
                seed,
                inst.senses.clone(),
            )?);
        }
    }
    Ok(DatasetSlice {
        family,
        n_distractors,
        cue_position,
        sample_seeds: seeds.to_vec(),
        prompts,
    })
}
