//! Synthetic key/value lookup task for the bundled toy model.
//!
//! A prompt is a run of `kV,` spans followed by a query `kX?`. One span is the
//! cue binding the queried key to its gold value; the others are distractors
//! binding different keys. The yes-query repeats the gold value and the
//! no-query names a foil.

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, Tokenizer};
use crate::tensor::{stream_label, RngStream};
use crate::trainer::Example;

use super::{DataError, DatasetSlice, Family, PromptSpec, Which};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    /// Key symbols, one ASCII byte each.
    pub keys: String,
    /// Value symbols, disjoint from the keys.
    pub values: String,
    /// Distractor counts used for generated training and eval sets.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Probability that the foil is a value bound by one of the distractors.
    pub foil_from_distractors: f64,
    /// Fraction of (key, value) cue bindings reserved for evaluation.
    pub eval_fraction: f64,
    pub split_seed: u64,
    /// Also train the subject position to predict the gold value.
    pub value_target: bool,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            keys: ('a'..='z').collect(),
            values: ('A'..='Z').collect(),
            min_distractors: 0,
            max_distractors: 3,
            foil_from_distractors: 0.5,
            eval_fraction: 0.2,
            split_seed: 0,
            value_target: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Eval,
}

impl ToyTaskSpec {
    pub fn validate(&self, max_distractors: usize) -> Result<(), DataError> {
        let ok = |s: &str| s.is_ascii() && !s.contains([',', '?']) && !s.is_empty();
        if !ok(&self.keys) || !ok(&self.values) {
            return Err(DataError::Parameter(
                "toy symbols must be non-empty ASCII without `,` or `?`".into(),
            ));
        }
        if self.keys.bytes().any(|k| self.values.as_bytes().contains(&k)) {
            return Err(DataError::Parameter("toy key and value symbols overlap".into()));
        }
        if has_duplicates(&self.keys) || has_duplicates(&self.values) {
            return Err(DataError::Parameter("toy symbols must be distinct".into()));
        }
        if self.keys.len() < max_distractors + 1 {
            return Err(DataError::Parameter(format!(
                "{} keys cannot supply {max_distractors} distractors plus a cue",
                self.keys.len()
            )));
        }
        if self.values.len() < 2 {
            return Err(DataError::Parameter("need at least two values for a foil".into()));
        }
        if self.min_distractors > self.max_distractors {
            return Err(DataError::Parameter("min_distractors exceeds max_distractors".into()));
        }
        if !(0.0..=1.0).contains(&self.foil_from_distractors) || !(0.0 < self.eval_fraction && self.eval_fraction < 1.0) {
            return Err(DataError::Parameter("toy probabilities out of range".into()));
        }
        Ok(())
    }

    fn split_of(&self, key: u8, value: u8) -> Split {
        let h = stream_label(&format!("toy-split/{}/{}{}", self.split_seed, key as char, value as char));
        if ((h % 1_000_000) as f64) < self.eval_fraction * 1e6 {
            Split::Eval
        } else {
            Split::Train
        }
    }

    fn draw_cue(&self, split: Split, rng: &mut RngStream) -> (u8, u8) {
        let (keys, values) = (self.keys.as_bytes(), self.values.as_bytes());
        loop {
            let k = keys[rng.below(keys.len())];
            let v = values[rng.below(values.len())];
            if self.split_of(k, v) == split {
                return (k, v);
            }
        }
    }

    fn prompt(
        &self,
        id: String,
        n: usize,
        cue_index: usize,
        split: Split,
        sample: u64,
        rng: &mut RngStream,
    ) -> Result<PromptSpec, DataError> {
        let (keys, values) = (self.keys.as_bytes(), self.values.as_bytes());
        let (key, gold) = self.draw_cue(split, rng);

        // distinct distractor keys, none equal to the cue key
        let mut pool: Vec<u8> = keys.iter().copied().filter(|&k| k != key).collect();
        let mut distractors = Vec::with_capacity(n);
        let mut bound = Vec::with_capacity(n);
        for i in 0..n {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
            let v = loop {
                let v = values[rng.below(values.len())];
                if v != gold {
                    break v;
                }
            };
            bound.push(v);
            distractors.push(format!("{}{},", pool[i] as char, v as char));
        }
        let foil = if !bound.is_empty() && rng.uniform() < self.foil_from_distractors {
            bound[rng.below(bound.len())]
        } else {
            loop {
                let v = values[rng.below(values.len())];
                if v != gold {
                    break v;
                }
            }
        };
        let (k, g, f) = (key as char, gold as char, foil as char);
        PromptSpec::new(
            id,
            Family::Toy,
            k.to_string(),
            format!("{k}{g},"),
            format!("{k}{g}?"),
            format!("{k}{f}?"),
            None,
            distractors,
            cue_index,
            sample,
            Some((g.to_string(), f.to_string())),
        )
    }
}

fn has_duplicates(s: &str) -> bool {
    let mut b: Vec<u8> = s.bytes().collect();
    b.sort_unstable();
    b.windows(2).any(|w| w[0] == w[1])
}

/// Training and eval sets with distractor counts and cue positions drawn
/// uniformly. Eval cue bindings never occur as training cues.
pub fn gen_toy_task(
    spec: &ToyTaskSpec,
    n_train: usize,
    n_eval: usize,
    rng: &mut RngStream,
) -> Result<(Vec<PromptSpec>, Vec<PromptSpec>), DataError> {
    spec.validate(spec.max_distractors)?;
    let mut make = |split: Split, count: usize, tag: &str| -> Result<Vec<PromptSpec>, DataError> {
        (0..count)
            .map(|i| {
                let n = spec.min_distractors + rng.below(spec.max_distractors - spec.min_distractors + 1);
                let c = rng.below(n + 1);
                spec.prompt(format!("toy/{tag}/{i}"), n, c, split, i as u64, rng)
            })
            .collect()
    };
    let train = make(Split::Train, n_train, "train")?;
    let eval = make(Split::Eval, n_eval, "eval")?;
    Ok((train, eval))
}

/// An eval slice with fixed distractor count and cue position.
pub fn gen_toy_slice(
    spec: &ToyTaskSpec,
    n_distractors: usize,
    cue_position: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<DatasetSlice, DataError> {
    spec.validate(n_distractors)?;
    if cue_position > n_distractors {
        return Err(DataError::Parameter(format!(
            "cue position {cue_position} exceeds distractor count {n_distractors}"
        )));
    }
    let mut rng = RngStream::new(seed, stream_label(&format!("toy/d{n_distractors}c{cue_position}")));
    let prompts = (0..n_pairs)
        .map(|i| {
            spec.prompt(
                format!("toy/d{n_distractors}c{cue_position}/{i}"),
                n_distractors,
                cue_position,
                Split::Eval,
                i as u64,
                &mut rng,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(DatasetSlice {
        family: Family::Toy,
        n_distractors,
        cue_position,
        sample_seeds: vec![seed],
        prompts,
    })
}

/// Training examples for both questions of every prompt: the answer token at
/// the final position, plus the gold value at the subject when enabled.
pub fn toy_examples(spec: &ToyTaskSpec, prompts: &[PromptSpec], tokenizer: &Tokenizer) -> Result<Vec<Example>, ModelError> {
    let yes = tokenizer.yes().ok_or_else(|| ModelError::Tokenize("vocabulary lacks a yes token".into()))?;
    let no = tokenizer.no().ok_or_else(|| ModelError::Tokenize("vocabulary lacks a no token".into()))?;
    let mut out = Vec::with_capacity(2 * prompts.len());
    for p in prompts {
        for which in Which::BOTH {
            let seq = tokenizer.tokenize(p.rendered(which))?;
            let last = seq.len() - 1;
            let mut targets = Vec::with_capacity(2);
            if spec.value_target && which == Which::Yes {
                let roles = p.roles(which).map_err(|e| ModelError::Tokenize(e.to_string()))?;
                let subject = seq
                    .last_token_of_span(roles.subject.start, roles.subject.end)
                    .ok_or_else(|| ModelError::Tokenize("subject span has no tokens".into()))?;
                targets.push((subject, seq.ids[subject + 1]));
            }
            targets.push((last, if which.gold_is_yes() { yes } else { no }));
            out.push(Example { tokens: seq.ids, targets });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distractors_is_cue_then_query() {
        let slice = gen_toy_slice(&ToyTaskSpec::default(), 0, 0, 5, 1).unwrap();
        for p in &slice.prompts {
            assert_eq!(p.rendered_yes, format!("{}{}", p.cue, p.question_yes));
            assert_eq!(p.rendered_yes.len(), 6);
            assert_eq!(&p.cue[..2], &p.question_yes[..2]);
        }
    }

    #[test]
    fn gold_never_in_distractors_and_keys_distinct() {
        let spec = ToyTaskSpec::default();
        let (train, eval) = gen_toy_task(&spec, 500, 200, &mut RngStream::new(3, 0)).unwrap();
        for p in train.iter().chain(&eval) {
            let gold = p.cue.as_bytes()[1];
            let key = p.cue.as_bytes()[0];
            let mut keys = vec![key];
            for d in &p.distractors {
                assert_ne!(d.as_bytes()[1], gold, "{}", p.rendered_yes);
                keys.push(d.as_bytes()[0]);
            }
            let n = keys.len();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), n);
            assert_ne!(p.question_yes, p.question_no);
            assert_eq!(p.rendered_yes.matches(p.cue.as_str()).count(), 1);
        }
    }

    #[test]
    fn train_and_eval_cues_disjoint() {
        let spec = ToyTaskSpec::default();
        let (train, eval) = gen_toy_task(&spec, 2000, 500, &mut RngStream::new(4, 0)).unwrap();
        let train_cues: std::collections::HashSet<&str> = train.iter().map(|p| p.cue.as_str()).collect();
        assert!(eval.iter().all(|p| !train_cues.contains(p.cue.as_str())));
        let slice = gen_toy_slice(&spec, 4, 2, 300, 9).unwrap();
        assert!(slice.prompts.iter().all(|p| !train_cues.contains(p.cue.as_str())));
    }

    #[test]
    fn same_rng_same_sets() {
        let spec = ToyTaskSpec::default();
        let a = gen_toy_task(&spec, 50, 20, &mut RngStream::new(5, 1)).unwrap();
        let b = gen_toy_task(&spec, 50, 20, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen_toy_slice(&spec, 3, 1, 10, 2).unwrap(), gen_toy_slice(&spec, 3, 1, 10, 2).unwrap());
    }

    #[test]
    fn small_vocabularies_rejected() {
        let spec = ToyTaskSpec {
            keys: "abc".into(),
            ..ToyTaskSpec::default()
        };
        assert!(matches!(gen_toy_slice(&spec, 3, 0, 1, 0), Err(DataError::Parameter(_))));
        let overlap = ToyTaskSpec {
            values: "aB".into(),
            ..ToyTaskSpec::default()
        };
        assert!(matches!(overlap.validate(0), Err(DataError::Parameter(_))));
    }

    #[test]
    fn examples_target_answer_and_value() {
        let spec = ToyTaskSpec::default();
        let slice = gen_toy_slice(&spec, 1, 0, 1, 0).unwrap();
        let ex = toy_examples(&spec, &slice.prompts, &Tokenizer::Byte).unwrap();
        assert_eq!(ex.len(), 2);
        let p = &slice.prompts[0];
        // BOS, 3 distractor bytes, 3 cue bytes, then the query key
        let subject = 1 + 6;
        assert_eq!(ex[0].targets, vec![(subject, p.cue.as_bytes()[1] as u32), (9, crate::model::tokenizer::YES)]);
        assert_eq!(ex[1].targets, vec![(9, crate::model::tokenizer::NO)]);
    }
}
