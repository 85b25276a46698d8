use std::collections::HashSet;
use std::sync::OnceLock;

use super::tokenize::{pretokenize, TokenizedText};
use super::Span;

/// Rule set revision; gold unit indices depend on it.
pub const SPLITTER_VERSION: u32 = 1;

const ABBREVIATIONS_FILE: &str = include_str!("../../data/abbreviations.txt");

pub fn abbreviations() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| ABBREVIATIONS_FILE.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect())
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text. A period closing a listed abbreviation never splits. Spans
/// are trimmed, so they cover exactly the non-whitespace text, in order.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (n, &(i, c)) in chars.iter().enumerate() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if !is_terminator(c) {
            continue;
        }
        let next = chars.get(n + 1).map(|&(_, c)| c);
        if !next.is_none_or(char::is_whitespace) {
            continue;
        }
        let end = i + c.len_utf8();
        if c == '.' && ends_with_abbreviation(&text[start.unwrap()..end]) {
            continue;
        }
        spans.push(Span::new(start.take().unwrap(), end));
    }
    if let Some(s) = start {
        let trimmed = text[s..].trim_end();
        spans.push(Span::new(s, s + trimmed.len()));
    }
    spans
}

fn ends_with_abbreviation(sentence: &str) -> bool {
    let last_word = sentence.rsplit(char::is_whitespace).next().unwrap_or("");
    let last_word = last_word.trim_start_matches(|c: char| !c.is_alphanumeric());
    abbreviations().contains(&last_word.to_lowercase())
}

/// A retrieval unit: raw text plus its sentence structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Span>,
    pub sentence_token_counts: Vec<usize>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = split_sentences(&text);
        let sentence_token_counts = sentences.iter().map(|s| pretokenize(s.slice(&text)).len()).collect();
        Self { id: id.into(), text, sentences, sentence_token_counts }
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn sentence(&self, i: usize) -> &str {
        self.sentences[i].slice(&self.text)
    }

    pub fn token_count(&self) -> usize {
        self.sentence_token_counts.iter().sum()
    }
}

/// Token-index range `[start, end)` of one sentence inside a tokenized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceTokens {
    pub start: usize,
    pub end: usize,
    /// The whole sentence fell beyond the truncation point.
    pub truncated: bool,
}

impl SentenceTokens {
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }
}

/// Maps each sentence of `doc` to the run of tokens whose source offsets
/// fall inside it. Fully truncated sentences get an empty, flagged range.
pub fn sentence_token_spans(doc: &Document, tok: &TokenizedText) -> Vec<SentenceTokens> {
    let mut out = Vec::with_capacity(doc.sentences.len());
    let mut cursor = 0usize;
    let last_real = tok.offsets.iter().rposition(Option::is_some).map_or(0, |p| p + 1);
    for sent in &doc.sentences {
        let mut first = None;
        let mut last = None;
        for (i, off) in tok.offsets.iter().enumerate().skip(cursor) {
            let Some(off) = off else { continue };
            if off.start >= sent.end {
                break;
            }
            if off.intersects(sent) {
                first.get_or_insert(i);
                last = Some(i);
            }
        }
        match (first, last) {
            (Some(s), Some(e)) => {
                out.push(SentenceTokens { start: s, end: e + 1, truncated: false });
                cursor = e + 1;
            }
            _ => {
                let pos = cursor.max(last_real);
                out.push(SentenceTokens { start: pos, end: pos, truncated: true });
            }
        }
    }
    out
}
