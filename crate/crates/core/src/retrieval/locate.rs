use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};
use crate::model::{AttentionMap, GearModel};
use crate::scalar::Scalar;
use crate::text::{sentence_token_spans, tokenize, Document, Role, Span, TokenizedText};

/// How attention is reduced over heads and query tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Sentence scores and the per-token scores they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRanking {
    /// `None` for sentences with no surviving token.
    pub sentence_scores: Vec<Option<f64>>,
    /// Scored sentence indices, best first.
    pub ranking: Vec<usize>,
    /// Sentences left out because their token span is empty.
    pub excluded: Vec<usize>,
    /// One score per document token position.
    pub token_scores: Vec<f64>,
    pub token_offsets: Vec<Option<Span>>,
}

impl LocalRanking {
    pub fn rank_of(&self, sentence: usize) -> Option<usize> {
        self.ranking.iter().position(|&s| s == sentence)
    }
}

/// Score of each document position at 1-based `layer`: attention reduced
/// over heads and unpadded query positions. Padded columns score 0.
pub fn token_scores(attn: &AttentionMap, layer: usize, agg: Aggregation) -> Result<Vec<f64>> {
    if !(1..=attn.layers).contains(&layer) {
        return Err(GearError::Config(format!("layer {layer} outside 1..={}", attn.layers)));
    }
    let l = layer - 1;
    let mut scores = vec![0.0; attn.d_len];
    let mut count = 0usize;
    for h in 0..attn.heads {
        for i in (0..attn.q_len).filter(|&i| attn.query_mask[i]) {
            for (s, w) in scores.iter_mut().zip(attn.row(l, h, i)) {
                *s += w;
            }
            count += 1;
        }
    }
    if agg == Aggregation::Mean && count > 0 {
        for s in &mut scores {
            *s /= count as f64;
        }
    }
    for (s, &m) in scores.iter_mut().zip(&attn.doc_mask) {
        if !m {
            *s = 0.0;
        }
    }
    Ok(scores)
}

/// Mean token score per sentence, ranked descending with ties to the
/// earlier sentence.
pub fn rank_sentences(doc: &Document, tok: &TokenizedText, token_scores: &[f64]) -> LocalRanking {
    let spans = sentence_token_spans(doc, tok);
    let mut sentence_scores = Vec::with_capacity(spans.len());
    let mut excluded = Vec::new();
    for (i, s) in spans.iter().enumerate() {
        let end = s.end.min(token_scores.len());
        if s.start >= end {
            excluded.push(i);
            sentence_scores.push(None);
            continue;
        }
        let sum: f64 = token_scores[s.start..end].iter().sum();
        sentence_scores.push(Some(sum / (end - s.start) as f64));
    }
    let mut ranking: Vec<usize> = (0..spans.len()).filter(|i| sentence_scores[*i].is_some()).collect();
    // scores equal up to summation rounding count as ties
    let key = |i: usize| (sentence_scores[i].unwrap_or(0.0) * 1e12).round();
    ranking.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    LocalRanking {
        sentence_scores,
        ranking,
        excluded,
        token_scores: token_scores.to_vec(),
        token_offsets: tok.offsets.clone(),
    }
}

/// Settings for attention-based sentence ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocateConfig {
    /// 1-based fusion layer; `None` uses the model's configured layer.
    pub layer: Option<usize>,
    pub aggregation: Aggregation,
    pub max_query_len: usize,
    pub max_doc_len: usize,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self { layer: None, aggregation: Aggregation::Mean, max_query_len: 32, max_doc_len: 128 }
    }
}

fn fuse_pair<S: Scalar>(
    model: &GearModel<S>,
    query: &str,
    doc: &Document,
    cfg: &LocateConfig,
) -> Result<(TokenizedText, AttentionMap)> {
    let tq = tokenize(query, &model.vocab, cfg.max_query_len, Role::Encoder);
    let td = tokenize(&doc.text, &model.vocab, cfg.max_doc_len, Role::Encoder);
    let enc = model.encode_document(&td)?;
    let fused = model.fuse(&tq, &enc)?;
    Ok((td, fused.attn))
}

/// Ranks the sentences of `doc` for `query` from fusion cross-attention.
pub fn locate<S: Scalar>(
    model: &GearModel<S>,
    query: &str,
    doc: &Document,
    cfg: &LocateConfig,
) -> Result<LocalRanking> {
    let layer = cfg.layer.unwrap_or(model.config.local_layer);
    if !(1..=model.config.layers).contains(&layer) {
        return Err(GearError::Config(format!("layer {layer} outside 1..={}", model.config.layers)));
    }
    let (td, attn) = fuse_pair(model, query, doc, cfg)?;
    Ok(rank_sentences(doc, &td, &token_scores(&attn, layer, cfg.aggregation)?))
}

/// One ranking per fusion layer from a single fusion pass.
pub fn locate_all_layers<S: Scalar>(
    model: &GearModel<S>,
    query: &str,
    doc: &Document,
    cfg: &LocateConfig,
) -> Result<Vec<LocalRanking>> {
    let (td, attn) = fuse_pair(model, query, doc, cfg)?;
    (1..=attn.layers).map(|l| Ok(rank_sentences(doc, &td, &token_scores(&attn, l, cfg.aggregation)?))).collect()
}
