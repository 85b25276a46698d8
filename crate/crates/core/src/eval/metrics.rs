use std::collections::HashMap;

use crate::error::{GearError, Result};
use crate::text::words;

fn check<T>(gold: &[T], k: usize) -> Result<()> {
    if k == 0 {
        return Err(GearError::Contract("k must be at least 1".into()));
    }
    if gold.is_empty() {
        return Err(GearError::Contract("gold set is empty".into()));
    }
    Ok(())
}

/// 1 if any gold item is within the first `k` of `ranked`.
pub fn recall_at_k<T: PartialEq>(ranked: &[T], gold: &[T], k: usize) -> Result<f64> {
    check(gold, k)?;
    Ok(if ranked.iter().take(k).any(|r| gold.contains(r)) { 1.0 } else { 0.0 })
}

/// Average precision over the first `k`, normalized by `min(|gold|, k)`.
pub fn map_at_k<T: PartialEq>(ranked: &[T], gold: &[T], k: usize) -> Result<f64> {
    check(gold, k)?;
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, r) in ranked.iter().take(k).enumerate() {
        if gold.contains(r) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(total / gold.len().min(k) as f64)
}

/// Lowercase, delete punctuation, drop `a`/`an`/`the`, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    lowered.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

fn overlap<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    a.iter()
        .filter(|t| match counts.get_mut(t.as_ref()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

fn f_measure(matched: usize, pred_len: usize, gold_len: usize) -> f64 {
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / pred_len as f64;
    let r = matched as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

/// Token-overlap F1 on normalized answers.
pub fn f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    f_measure(overlap(&p, &g), p.len(), g.len())
}

fn rouge_tokens(s: &str) -> Vec<String> {
    words(s)
}

fn both_empty(p: &[String], g: &[String]) -> Option<f64> {
    match (p.is_empty(), g.is_empty()) {
        (true, true) => Some(1.0),
        (false, false) => None,
        _ => Some(0.0),
    }
}

/// Unigram-overlap F-measure.
pub fn rouge_1(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (rouge_tokens(prediction), rouge_tokens(gold));
    both_empty(&p, &g).unwrap_or_else(|| f_measure(overlap(&p, &g), p.len(), g.len()))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (rouge_tokens(prediction), rouge_tokens(gold));
    both_empty(&p, &g).unwrap_or_else(|| f_measure(lcs_len(&p, &g), p.len(), g.len()))
}
