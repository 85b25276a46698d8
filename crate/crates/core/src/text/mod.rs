//! Vocabulary, tokenization and sentence segmentation.

mod sentences;
mod tokenize;
mod vocab;

use serde::{Deserialize, Serialize};

pub use sentences::{abbreviations, sentence_token_spans, split_sentences, Document, SentenceTokens, SPLITTER_VERSION};
pub use tokenize::{detokenize, pretokenize, tokenize, words, PreToken, Role, TokenizedText};
pub use vocab::{Vocabulary, CLS, DEC, EOS, NUM_SPECIALS, PAD, SEP, SPECIAL_TOKENS, UNK};

/// Half-open byte range into a source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}
