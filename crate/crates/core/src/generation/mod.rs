//! Greedy and beam decoding from fused query states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};
use crate::model::{Fused, GearModel};
use crate::scalar::Scalar;
use crate::text::{detokenize, tokenize, Document, Role, CLS, DEC, EOS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    /// Exponent on hypothesis length when ranking beam candidates.
    pub length_penalty: f64,
    pub max_query_len: usize,
    pub max_doc_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            strategy: Strategy::Greedy,
            length_penalty: 1.0,
            max_query_len: 32,
            max_doc_len: 128,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(GearError::Config("max_new_tokens must be at least 1".into()));
        }
        if let Strategy::Beam { width } = self.strategy {
            if width < 2 {
                return Err(GearError::Config(format!("beam width {width} must be at least 2")));
            }
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(GearError::Config("length penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A decoded continuation (without the leading `[DEC]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / len^penalty`
    pub fn score(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.ids.len().max(1) as f64).powf(length_penalty)
    }

    /// Generated ids with a trailing `[EOS]` removed.
    pub fn content(&self) -> &[usize] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Tokens the decoder may never emit.
const BANNED: [usize; 4] = [PAD, CLS, SEP, DEC];

fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy()).collect();
    for &b in &BANNED {
        out[b] = f64::NEG_INFINITY;
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = out.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    for x in &mut out {
        *x -= z;
    }
    out
}

fn step_budget<S: Scalar>(model: &GearModel<S>, max_new: usize) -> usize {
    max_new.min(model.config.max_positions - 1)
}

fn next_log_probs<S: Scalar>(model: &GearModel<S>, fused: &Fused<S>, ids: &[usize]) -> Result<Vec<f64>> {
    let mut prefix = Vec::with_capacity(ids.len() + 1);
    prefix.push(DEC);
    prefix.extend_from_slice(ids);
    Ok(log_softmax(model.decode_step(fused, &prefix)?.data()))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: Scalar>(model: &GearModel<S>, fused: &Fused<S>, max_new: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false };
    for _ in 0..step_budget(model, max_new) {
        let lp = next_log_probs(model, fused, &h.ids)?;
        let t = argmax(&lp);
        h.ids.push(t);
        h.log_prob += lp[t];
        if t == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Log-probability of continuing `[DEC]` with `ids`.
pub fn sequence_log_prob<S: Scalar>(model: &GearModel<S>, fused: &Fused<S>, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut prefix = vec![DEC];
    prefix.extend_from_slice(&ids[..ids.len() - 1]);
    let logits = model.decode_logits(fused, &prefix)?;
    let v = model.config.vocab_size;
    let mut total = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        total += log_softmax(&logits.data()[i * v..(i + 1) * v])[t];
    }
    Ok(total)
}

/// Beam search keeping `width` live hypotheses ranked by log-probability;
/// the result is the best length-penalized candidate, with the greedy
/// path always among the candidates.
pub fn beam<S: Scalar>(
    model: &GearModel<S>,
    fused: &Fused<S>,
    width: usize,
    max_new: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let width = width.max(1);
    let mut live = vec![Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_budget(model, max_new) {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let lp = next_log_probs(model, fused, &h.ids)?;
            let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(width) {
                let mut ids = h.ids.clone();
                ids.push(t);
                cands.push(Hypothesis { ids, log_prob: h.log_prob + lp[t], finished: t == EOS });
            }
        }
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.ids.cmp(&b.ids)));
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.push(greedy(model, fused, max_new)?);
    let best = done
        .into_iter()
        .reduce(|a, b| if b.score(length_penalty) > a.score(length_penalty) { b } else { a })
        .expect("at least the greedy candidate");
    Ok(best)
}

/// Decodes a continuation for an already fused pair.
pub fn decode<S: Scalar>(model: &GearModel<S>, fused: &Fused<S>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(model, fused, cfg.max_new_tokens),
        Strategy::Beam { width } => beam(model, fused, width, cfg.max_new_tokens, cfg.length_penalty),
    }
}

/// Encodes, fuses and decodes; returns detokenized text.
pub fn generate<S: Scalar>(model: &GearModel<S>, query: &str, doc: &Document, cfg: &DecodeConfig) -> Result<String> {
    let tq = tokenize(query, &model.vocab, cfg.max_query_len, Role::Encoder);
    let td = tokenize(&doc.text, &model.vocab, cfg.max_doc_len, Role::Encoder);
    let fused = model.fuse(&tq, &model.encode_document(&td)?)?;
    let h = decode(model, &fused, cfg)?;
    Ok(detokenize(h.content(), &model.vocab))
}

/// [`generate`] over many pairs, in input order.
pub fn batch_generate<S: Scalar>(
    model: &GearModel<S>,
    items: &[(String, Document)],
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    cfg.validate()?;
    items
        .par_iter()
        .enumerate()
        .map(|(i, (q, d))| generate(model, q, d, cfg).map_err(|e| GearError::Item { index: i, source: Box::new(e) }))
        .collect()
}
