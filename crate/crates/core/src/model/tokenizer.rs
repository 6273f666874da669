use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const BOS: u32 = 256;
pub const YES: u32 = 257;
pub const NO: u32 = 258;
pub const SEP: u32 = 259;
pub const BYTE_VOCAB_SIZE: usize = 260;

const SPECIALS: [(u32, &str); 4] = [(BOS, "<bos>"), (YES, "<yes>"), (NO, "<no>"), (SEP, "<sep>")];

/// Token ids together with the text they were produced from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
    /// Byte offset in `text` covered by each token, `None` for specials.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offsets: Vec<Option<(usize, usize)>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token indices whose text overlaps the byte range `[start, end)`.
    pub fn tokens_in_span(&self, start: usize, end: usize) -> Vec<usize> {
        self.offsets
            .iter()
            .enumerate()
            .filter_map(|(i, o)| match o {
                Some((s, e)) if *s < end && *e > start => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Index of the token covering the last byte of `[start, end)`.
    pub fn last_token_of_span(&self, start: usize, end: usize) -> Option<usize> {
        self.tokens_in_span(start, end).last().copied()
    }

    pub fn with_appended(&self, id: u32) -> Self {
        let mut ids = self.ids.clone();
        ids.push(id);
        let mut offsets = self.offsets.clone();
        if !offsets.is_empty() {
            offsets.push(None);
        }
        Self {
            ids,
            text: self.text.clone(),
            offsets,
        }
    }
}

/// Vocabulary loaded from a token-table file: one token string per line,
/// id = line number.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    tokens: Vec<String>,
}

impl TokenTable {
    pub fn parse(content: &str) -> Result<Self, ModelError> {
        let tokens: Vec<String> = content.lines().map(|l| l.to_string()).collect();
        if tokens.is_empty() {
            return Err(ModelError::Format("token table is empty".into()));
        }
        Ok(Self { tokens })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let content = std::fs::read_to_string(path)?;
        Self::parse(&content)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn id_of(&self, s: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == s).map(|i| i as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Tokenizer {
    /// 256 byte tokens plus BOS/YES/NO/SEP.
    #[default]
    Byte,
    /// Greedy longest-match over an external table.
    Table(TokenTable),
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => BYTE_VOCAB_SIZE,
            Tokenizer::Table(t) => t.len(),
        }
    }

    pub fn bos(&self) -> Option<u32> {
        self.special("<bos>", BOS)
    }

    pub fn yes(&self) -> Option<u32> {
        self.special("<yes>", YES)
    }

    pub fn no(&self) -> Option<u32> {
        self.special("<no>", NO)
    }

    pub fn sep(&self) -> Option<u32> {
        self.special("<sep>", SEP)
    }

    fn special(&self, name: &str, byte_id: u32) -> Option<u32> {
        match self {
            Tokenizer::Byte => Some(byte_id),
            Tokenizer::Table(t) => t.id_of(name),
        }
    }

    /// Tokenizes `text`, prefixed with BOS when the vocabulary has one.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, ModelError> {
        if text.is_empty() {
            return Err(ModelError::Tokenize("cannot tokenize an empty string".into()));
        }
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        if let Some(bos) = self.bos() {
            ids.push(bos);
            offsets.push(None);
        }
        match self {
            Tokenizer::Byte => {
                for (i, b) in text.bytes().enumerate() {
                    ids.push(b as u32);
                    offsets.push(Some((i, i + 1)));
                }
            }
            Tokenizer::Table(table) => {
                let bytes = text.as_bytes();
                let mut pos = 0;
                while pos < bytes.len() {
                    let best = table
                        .tokens
                        .iter()
                        .enumerate()
                        .filter(|(_, t)| !t.is_empty() && bytes[pos..].starts_with(t.as_bytes()))
                        .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)));
                    let (id, tok) = best.ok_or_else(|| {
                        ModelError::Tokenize(format!(
                            "no table token matches input at byte {pos}"
                        ))
                    })?;
                    ids.push(id as u32);
                    offsets.push(Some((pos, pos + tok.len())));
                    pos += tok.len();
                }
            }
        }
        Ok(TokenSequence {
            ids,
            text: text.to_string(),
            offsets,
        })
    }

    /// Surface form of token ids. BOS is dropped; other specials render as
    /// their `<name>` form.
    pub fn detokenize_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, ModelError> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(ModelError::Range(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab_size()
                )));
            }
            match self {
                Tokenizer::Byte => {
                    if id < 256 {
                        out.push(id as u8);
                    } else if id != BOS {
                        let name = SPECIALS.iter().find(|(s, _)| *s == id).map(|(_, n)| *n).unwrap();
                        out.extend_from_slice(name.as_bytes());
                    }
                }
                Tokenizer::Table(t) => {
                    if Some(id) != self.bos() {
                        out.extend_from_slice(t.tokens[id as usize].as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, ModelError> {
        Ok(String::from_utf8_lossy(&self.detokenize_bytes(ids)?).into_owned())
    }
}
