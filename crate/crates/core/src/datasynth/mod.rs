//! Turns raw documents into (keyword query, document, unit sentence) triples.

mod rewriter;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};
use crate::model::GearModel;
use crate::records::{CorpusRecord, Triple};
use crate::scalar::Scalar;
use crate::text::{pretokenize, tokenize, words, Document, Role};

pub use rewriter::{stopwords, Rewriter, RuleRewriter, ServiceRewriter, REWRITE_PROMPT, TOKEN_ENV};

/// Words that, leading a sentence, stand in for its subject being a pronoun.
const DISCOURSE_ADVERBS: [&str; 5] = ["however", "then", "thus", "also", "moreover"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_sentences: usize,
    pub min_doc_tokens: usize,
    pub max_doc_tokens: usize,
    pub min_candidate_tokens: usize,
    pub max_candidate_tokens: usize,
    pub pronouns: Vec<String>,
    /// Inclusive lower bound on query/document cosine.
    pub relevance_threshold: f64,
    pub candidates_per_doc: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_sentences: 3,
            min_doc_tokens: 200,
            max_doc_tokens: 500,
            min_candidate_tokens: 8,
            max_candidate_tokens: 20,
            pronouns: ["this", "these", "it", "that", "those", "they", "he", "she", "we", "you", "i"]
                .map(String::from)
                .to_vec(),
            relevance_threshold: 0.5,
            candidates_per_doc: 3,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_doc_tokens >= self.max_doc_tokens {
            return Err(GearError::Config("min_doc_tokens must be below max_doc_tokens".into()));
        }
        if self.min_candidate_tokens > self.max_candidate_tokens {
            return Err(GearError::Config("candidate token range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.relevance_threshold) {
            return Err(GearError::Config("relevance_threshold must lie in [0, 1]".into()));
        }
        if self.candidates_per_doc == 0 {
            return Err(GearError::Config("candidates_per_doc must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooFewSentences,
    InsufficientCandidates,
    EmptyRewrite,
    RewriteFailed,
    LowRelevance,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::TooShort => "too_short",
            RejectReason::TooFewSentences => "too_few_sentences",
            RejectReason::InsufficientCandidates => "insufficient_candidates",
            RejectReason::EmptyRewrite => "empty_rewrite",
            RejectReason::RewriteFailed => "rewrite_failed",
            RejectReason::LowRelevance => "low_relevance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub reason: RejectReason,
    /// Relevance score for `LowRelevance`.
    pub score: Option<f64>,
    pub detail: Option<String>,
}

impl Rejection {
    fn new(reason: RejectReason) -> Self {
        Self { reason, score: None, detail: None }
    }
}

fn is_line_break_run(sentence: &str) -> bool {
    let mut breaks = 0;
    for c in sentence.chars() {
        match c {
            '\n' => {
                breaks += 1;
                if breaks >= 2 {
                    return true;
                }
            }
            c if c.is_whitespace() => {}
            _ => breaks = 0,
        }
    }
    false
}

/// Cleans a raw document: drops blank, line-break-run and repeated
/// sentences, keeps whole sentences up to the token cap, then applies the
/// size rules.
pub fn preprocess_document(id: &str, text: &str, cfg: &FilterConfig) -> std::result::Result<Document, Rejection> {
    let raw = Document::new(id, text);
    let mut seen = HashSet::new();
    let mut kept: Vec<&str> = Vec::new();
    let mut tokens = 0;
    for (i, s) in (0..raw.num_sentences()).map(|i| (i, raw.sentence(i))) {
        if words(s).is_empty() || is_line_break_run(s) || !seen.insert(s) {
            continue;
        }
        let n = raw.sentence_token_counts[i];
        if tokens + n > cfg.max_doc_tokens {
            break;
        }
        tokens += n;
        kept.push(s);
    }
    let doc = Document::new(id, kept.join(" "));
    debug_assert_eq!(doc.num_sentences(), kept.len());
    if doc.num_sentences() < cfg.min_sentences {
        return Err(Rejection::new(RejectReason::TooFewSentences));
    }
    if doc.token_count() < cfg.min_doc_tokens {
        return Err(Rejection::new(RejectReason::TooShort));
    }
    Ok(doc)
}

/// Whether one sentence may serve as a unit: length in range and no
/// pronoun subject by the first-word rule.
pub fn is_candidate(sentence: &str, cfg: &FilterConfig) -> bool {
    let n = pretokenize(sentence).len();
    if n < cfg.min_candidate_tokens || n > cfg.max_candidate_tokens {
        return false;
    }
    let w = words(sentence);
    let pronoun = |x: &String| cfg.pronouns.iter().any(|p| p == x);
    match w.as_slice() {
        [] => false,
        [first, ..] if pronoun(first) => false,
        [first, second, ..] if DISCOURSE_ADVERBS.contains(&first.as_str()) && pronoun(second) => false,
        _ => true,
    }
}

/// Draws `candidates_per_doc` qualifying sentence indices (ascending).
pub fn select_candidates(
    doc: &Document,
    cfg: &FilterConfig,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<usize>, Rejection> {
    let pool: Vec<usize> = (0..doc.num_sentences()).filter(|&i| is_candidate(doc.sentence(i), cfg)).collect();
    if pool.len() < cfg.candidates_per_doc {
        return Err(Rejection::new(RejectReason::InsufficientCandidates));
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), cfg.candidates_per_doc).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Rewrites one sentence; an empty reply is a rejection.
pub fn rewrite(sentence: &str, rewriter: &dyn Rewriter) -> std::result::Result<String, Rejection> {
    match rewriter.rewrite(sentence) {
        Ok(q) if q.trim().is_empty() => Err(Rejection::new(RejectReason::EmptyRewrite)),
        Ok(q) => Ok(q.trim().to_string()),
        Err(e) => Err(Rejection { detail: Some(e.to_string()), ..Rejection::new(RejectReason::RewriteFailed) }),
    }
}

/// Drops repeated keywords, keeping first occurrences. Comparison is per
/// lowercased word, so a multi-word keyword loses any word already used.
pub fn dedupe_keywords(query: &str) -> String {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for keyword in query.split(',') {
        let kept: Vec<&str> = keyword
            .split_whitespace()
            .filter(|piece| {
                let w = words(piece);
                !w.is_empty() && w.iter().all(|x| !seen.contains(x)) && {
                    seen.extend(w);
                    true
                }
            })
            .collect();
        if !kept.is_empty() {
            out.push(kept.join(" "));
        }
    }
    out.join(", ")
}

/// Query/document similarity used for the relevance filter.
pub trait RelevanceModel: Sync {
    fn relevance(&self, query: &str, doc: &Document) -> Result<f64>;
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine between pooled query and document embeddings.
pub struct EncoderRelevance<'a, S> {
    pub model: &'a GearModel<S>,
    pub max_query_len: usize,
    pub max_doc_len: usize,
}

impl<S: Scalar> RelevanceModel for EncoderRelevance<'_, S> {
    fn relevance(&self, query: &str, doc: &Document) -> Result<f64> {
        let tq = tokenize(query, &self.model.vocab, self.max_query_len, Role::Encoder);
        let td = tokenize(&doc.text, &self.model.vocab, self.max_doc_len, Role::Encoder);
        let q: Vec<f64> = self.model.encode_query(&tq)?.data().iter().map(|x| x.to_f64_lossy()).collect();
        let d: Vec<f64> = self.model.encode_document(&td)?.pooled.data().iter().map(|x| x.to_f64_lossy()).collect();
        Ok(cosine(&q, &d))
    }
}

/// Fraction of query words present in the document; the filter used when
/// no trained encoder is given.
pub struct LexicalRelevance;

impl RelevanceModel for LexicalRelevance {
    fn relevance(&self, query: &str, doc: &Document) -> Result<f64> {
        let q = words(query);
        if q.is_empty() {
            return Ok(0.0);
        }
        let d: HashSet<String> = words(&doc.text).into_iter().collect();
        Ok(q.iter().filter(|w| d.contains(*w)).count() as f64 / q.len() as f64)
    }
}

/// Accepts iff `score >= threshold`.
pub fn passes_relevance(score: f64, cfg: &FilterConfig) -> bool {
    score >= cfg.relevance_threshold
}

/// De-duplicates the query and applies the relevance filter.
pub fn postprocess(
    query: &str,
    doc: &Document,
    unit_index: usize,
    relevance: &dyn RelevanceModel,
    cfg: &FilterConfig,
) -> std::result::Result<Triple, Rejection> {
    let query = dedupe_keywords(query);
    if query.is_empty() {
        return Err(Rejection::new(RejectReason::EmptyRewrite));
    }
    let score = relevance
        .relevance(&query, doc)
        .map_err(|e| Rejection { detail: Some(e.to_string()), ..Rejection::new(RejectReason::LowRelevance) })?;
    if !passes_relevance(score, cfg) {
        return Err(Rejection { score: Some(score), ..Rejection::new(RejectReason::LowRelevance) });
    }
    Ok(Triple {
        query,
        doc_id: doc.id.clone(),
        doc_text: doc.text.clone(),
        unit_index,
        target: doc.sentence(unit_index).to_string(),
    })
}

/// Per-stage counts. Documents: `input_docs == accepted_docs + Σ doc_rejections`.
/// Candidates: `candidates == triples + Σ candidate_rejections`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStats {
    pub input_docs: usize,
    pub accepted_docs: usize,
    pub doc_rejections: BTreeMap<RejectReason, usize>,
    pub candidates: usize,
    pub triples: usize,
    pub candidate_rejections: BTreeMap<RejectReason, usize>,
}

impl SynthStats {
    pub fn rejected(&self, reason: RejectReason) -> usize {
        self.doc_rejections.get(&reason).copied().unwrap_or(0)
            + self.candidate_rejections.get(&reason).copied().unwrap_or(0)
    }

    pub fn is_consistent(&self) -> bool {
        self.input_docs == self.accepted_docs + self.doc_rejections.values().sum::<usize>()
            && self.candidates == self.triples + self.candidate_rejections.values().sum::<usize>()
    }
}

enum DocOutcome {
    Rejected(RejectReason),
    Accepted(Vec<std::result::Result<Triple, RejectReason>>),
}

fn doc_rng(seed: u64, ordinal: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal as u64);
    rng
}

fn process(
    ordinal: usize,
    rec: &CorpusRecord,
    cfg: &FilterConfig,
    rewriter: &dyn Rewriter,
    relevance: &dyn RelevanceModel,
) -> DocOutcome {
    let doc = match preprocess_document(&rec.id, &rec.text, cfg) {
        Ok(d) => d,
        Err(r) => return DocOutcome::Rejected(r.reason),
    };
    let units = match select_candidates(&doc, cfg, &mut doc_rng(cfg.seed, ordinal)) {
        Ok(u) => u,
        Err(r) => return DocOutcome::Rejected(r.reason),
    };
    DocOutcome::Accepted(
        units
            .into_iter()
            .map(|u| {
                let q = rewrite(doc.sentence(u), rewriter).map_err(|r| r.reason)?;
                postprocess(&q, &doc, u, relevance, cfg).map_err(|r| r.reason)
            })
            .collect(),
    )
}

/// Runs every stage over the corpus. Documents are processed in parallel;
/// triples come out in corpus order.
pub fn synthesize(
    corpus: &[CorpusRecord],
    cfg: &FilterConfig,
    rewriter: &dyn Rewriter,
    relevance: &dyn RelevanceModel,
) -> Result<(Vec<Triple>, SynthStats)> {
    cfg.validate()?;
    let outcomes: Vec<DocOutcome> =
        corpus.par_iter().enumerate().map(|(i, rec)| process(i, rec, cfg, rewriter, relevance)).collect();
    let mut stats = SynthStats { input_docs: corpus.len(), ..SynthStats::default() };
    let mut triples = Vec::new();
    for outcome in outcomes {
        match outcome {
            DocOutcome::Rejected(r) => *stats.doc_rejections.entry(r).or_default() += 1,
            DocOutcome::Accepted(items) => {
                stats.accepted_docs += 1;
                for item in items {
                    stats.candidates += 1;
                    match item {
                        Ok(t) => triples.push(t),
                        Err(r) => *stats.candidate_rejections.entry(r).or_default() += 1,
                    }
                }
            }
        }
    }
    stats.triples = triples.len();
    Ok((triples, stats))
}
