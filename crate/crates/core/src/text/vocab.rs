use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tokenize::pretokenize;
use crate::error::{GearError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
/// Start-of-generation marker fed to the decoder.
pub const DEC: usize = 4;
pub const EOS: usize = 5;
pub const NUM_SPECIALS: usize = 6;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[DEC]", "[EOS]"];

/// Word-level vocabulary with six reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from already-ranked words (specials are implicit).
    pub fn from_words<I, T>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w: String = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(GearError::Contract(format!("invalid vocabulary entry {w:?}")));
            }
            if index.contains_key(&w) {
                return Err(GearError::Contract(format!("duplicate vocabulary entry {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    /// Frequency-ranked vocabulary over lowercased word and punctuation
    /// tokens. Ties break lexicographically; `max_size` counts the specials.
    pub fn build<'a, I>(corpus: I, max_size: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            for tok in pretokenize(text) {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(GearError::EmptySequence("vocabulary corpus is empty".into()));
        }
        if max_size < NUM_SPECIALS {
            return Err(GearError::Config(format!("vocabulary max size {max_size} < {NUM_SPECIALS}")));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Non-special entries in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// Stable 64-bit digest of the token list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// One token per line; line `n` holds id `n + 6`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        Self::from_words(s.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| GearError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| GearError::io(path, e))?;
        Self::from_file_string(&s)
    }
}
