use super::vocab::{Vocabulary, CLS, EOS, NUM_SPECIALS, PAD, SEP};
use super::Span;

/// A lowercased pre-token and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreToken {
    pub text: String,
    pub span: Span,
}

impl PreToken {
    pub fn is_word(&self) -> bool {
        self.text.chars().all(char::is_alphanumeric)
    }
}

/// Splits on whitespace; alphanumeric runs become words and every other
/// character becomes its own token.
pub fn pretokenize(text: &str) -> Vec<PreToken> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<PreToken>| {
        if let Some(s) = start.take() {
            out.push(PreToken { text: text[s..end].to_lowercase(), span: Span::new(s, end) });
        }
    };
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        flush(&mut word_start, i, &mut out);
        if !ch.is_whitespace() {
            let end = i + ch.len_utf8();
            out.push(PreToken { text: text[i..end].to_lowercase(), span: Span::new(i, end) });
        }
    }
    flush(&mut word_start, text.len(), &mut out);
    out
}

/// Lowercased alphanumeric words only.
pub fn words(text: &str) -> Vec<String> {
    pretokenize(text).into_iter().filter(PreToken::is_word).map(|t| t.text).collect()
}

/// Which special tokens wrap the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// `[CLS] … [SEP]`
    Encoder,
    /// `… [EOS]`
    DecoderTarget,
    Plain,
}

/// Ids, attention mask and source offsets for one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    /// Source span per position; `None` for special and padding tokens.
    pub offsets: Vec<Option<Span>>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unpadded positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `[PAD]` up to `len` positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut t = self.clone();
        while t.ids.len() < len {
            t.ids.push(PAD);
            t.mask.push(0);
            t.offsets.push(None);
        }
        t
    }
}

/// Maps `text` to vocabulary ids, adding the specials of `role` and
/// truncating content so the result never exceeds `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize, role: Role) -> TokenizedText {
    assert!(max_len >= 3, "max_len must leave room for specials");
    let reserved = match role {
        Role::Encoder => 2,
        Role::DecoderTarget => 1,
        Role::Plain => 0,
    };
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    if role == Role::Encoder {
        ids.push(CLS);
        offsets.push(None);
    }
    for tok in pretokenize(text).into_iter().take(max_len - reserved) {
        ids.push(vocab.id_or_unk(&tok.text));
        offsets.push(Some(tok.span));
    }
    match role {
        Role::Encoder => {
            ids.push(SEP);
            offsets.push(None);
        }
        Role::DecoderTarget => {
            ids.push(EOS);
            offsets.push(None);
        }
        Role::Plain => {}
    }
    let mask = vec![1; ids.len()];
    TokenizedText { ids, mask, offsets }
}

/// Joins non-special tokens with single spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id >= NUM_SPECIALS || id == super::vocab::UNK)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
