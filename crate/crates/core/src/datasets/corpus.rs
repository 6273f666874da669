use std::path::Path;

use crate::tensor::RngStream;

use super::DataError;

/// Bundled distractor sentences, one per line.
pub const DEFAULT_CORPUS: &str = include_str!("../../data/distractors.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorCorpus {
    pub sentences: Vec<String>,
    pub source: String,
}

impl DistractorCorpus {
    /// Parses one sentence per line; blank lines and `#` comments are skipped.
    pub fn parse(content: &str, source: &str) -> Result<Self, DataError> {
        let mut sentences = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let s = line.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if !s.ends_with(['.', '!', '?']) {
                return Err(DataError::Schema {
                    row: i + 1,
                    message: format!("sentence lacks terminal punctuation: `{s}`"),
                });
            }
            sentences.push(s.to_string());
        }
        if sentences.is_empty() {
            return Err(DataError::Data(format!("distractor corpus `{source}` is empty")));
        }
        Ok(Self {
            sentences,
            source: source.to_string(),
        })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_CORPUS, "bundled").expect("bundled corpus is valid")
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// `k` distinct sentences in draw order.
pub fn sample_distractors(corpus: &DistractorCorpus, k: usize, rng: &mut RngStream) -> Result<Vec<String>, DataError> {
    if k > corpus.len() {
        return Err(DataError::Parameter(format!(
            "cannot draw {k} distinct sentences from a corpus of {}",
            corpus.len()
        )));
    }
    // partial Fisher-Yates over indices
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
        out.push(corpus.sentences[idx[i]].clone());
    }
    Ok(out)
}
