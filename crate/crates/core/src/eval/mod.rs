//! Retrieval and generation metrics and the harnesses that compute them.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};
use crate::generation::{generate, DecodeConfig};
use crate::model::GearModel;
use crate::records::Triple;
use crate::retrieval::{locate, locate_all_layers, EmbeddingIndex, LocateConfig};
use crate::scalar::Scalar;
use crate::text::{tokenize, Document, Role};

pub use metrics::{exact_match, f1, lcs_len, map_at_k, normalize_answer, recall_at_k, rouge_1, rouge_l};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Global,
    Local,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub gold: String,
    /// 1-based rank of the gold item; `None` if it was not ranked.
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub dataset: String,
    pub fingerprint: String,
    /// Mean of each per-query metric.
    pub metrics: BTreeMap<String, f64>,
    pub queries: Vec<QueryRecord>,
    /// Seconds, filled in only when timing is requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

impl EvalReport {
    fn assemble<S: Scalar>(task: Task, model: &GearModel<S>, queries: Vec<QueryRecord>) -> Self {
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        for q in &queries {
            for (k, v) in &q.metrics {
                *metrics.entry(k.clone()).or_default() += v;
            }
        }
        if !queries.is_empty() {
            for v in metrics.values_mut() {
                *v /= queries.len() as f64;
            }
        }
        Self {
            task,
            dataset: String::new(),
            fingerprint: format!("{:016x}", model.fingerprint()),
            metrics,
            queries,
            wall_clock: None,
        }
    }

    pub fn with_dataset(mut self, name: impl Into<String>) -> Self {
        self.dataset = name.into();
        self
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Largest deviation between an aggregate and the mean of its records.
    pub fn aggregate_error(&self) -> f64 {
        let n = self.queries.len().max(1) as f64;
        self.metrics
            .iter()
            .map(|(k, v)| {
                let mean = self.queries.iter().map(|q| q.metrics.get(k).copied().unwrap_or(0.0)).sum::<f64>() / n;
                (mean - v).abs()
            })
            .fold(0.0, f64::max)
    }

    /// One row per metric family, recall columns before MAP columns.
    pub fn table(&self) -> String {
        let order = |name: &str| {
            let (prefix, rest) = name.rsplit_once('.').map_or(("", name), |(p, r)| (p, r));
            let family = match rest.split('@').next() {
                Some("R") => 0,
                Some("M") => 1,
                _ => 2,
            };
            let k: usize = rest.split('@').nth(1).and_then(|x| x.parse().ok()).unwrap_or(0);
            (prefix.to_string(), family, k, rest.to_string())
        };
        let mut names: Vec<&String> = self.metrics.keys().collect();
        names.sort_by_key(|n| order(n));
        let mut rows: BTreeMap<String, Vec<(&str, f64)>> = BTreeMap::new();
        for n in names {
            let (prefix, _, _, rest) = order(n);
            let label = if prefix.is_empty() { "gear".to_string() } else { prefix };
            rows.entry(label).or_default().push((&n[n.len() - rest.len()..], self.metrics[n]));
        }
        let mut out = String::new();
        for (label, cols) in rows {
            let _ = writeln!(out, "{:<10}{}", "", cols.iter().map(|(c, _)| format!("{c:>9}")).collect::<String>());
            let _ = writeln!(out, "{label:<10}{}", cols.iter().map(|(_, v)| format!("{v:>9.4}")).collect::<String>());
        }
        let _ = write!(out, "queries: {}", self.queries.len());
        out
    }
}

fn retrieval_metrics<T: PartialEq>(
    prefix: &str,
    ranked: &[T],
    gold: &T,
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let gold = std::slice::from_ref(gold);
    let mut m = BTreeMap::new();
    for &k in ks {
        m.insert(format!("{prefix}R@{k}"), recall_at_k(ranked, gold, k)?);
        m.insert(format!("{prefix}M@{k}"), map_at_k(ranked, gold, k)?);
    }
    Ok(m)
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(GearError::Config("cutoffs must be non-empty and at least 1".into()));
    }
    Ok(())
}

fn per_item<T, F>(triples: &[Triple], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Triple) -> Result<T> + Sync,
{
    triples
        .par_iter()
        .enumerate()
        .map(|(i, t)| f(t).map_err(|e| GearError::Item { index: i, source: Box::new(e) }))
        .collect()
}

/// Ranks the whole index for every query and scores the gold document.
pub fn evaluate_global<S: Scalar>(
    index: &EmbeddingIndex,
    model: &GearModel<S>,
    triples: &[Triple],
    ks: &[usize],
    max_query_len: usize,
) -> Result<EvalReport> {
    check_ks(ks)?;
    index.check_model(model)?;
    let queries = per_item(triples, |t| {
        let res = index.search(model, &t.query, index.len(), max_query_len)?;
        let ranked: Vec<&str> = res.hits.iter().map(|h| h.id.as_str()).collect();
        Ok(QueryRecord {
            query: t.query.clone(),
            gold: t.doc_id.clone(),
            rank: res.rank_of(&t.doc_id).map(|r| r + 1),
            prediction: ranked.first().map(|s| s.to_string()),
            metrics: retrieval_metrics("", &ranked, &t.doc_id.as_str(), ks)?,
        })
    })?;
    Ok(EvalReport::assemble(Task::Global, model, queries))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Sentence order from encoding each sentence on its own with the
/// document encoder and comparing against the query embedding.
pub fn chunked_ranking<S: Scalar>(
    model: &GearModel<S>,
    query: &str,
    doc: &Document,
    cfg: &LocateConfig,
) -> Result<Vec<usize>> {
    let to64 = |t: &[S]| t.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
    let q = unit(to64(model.encode_query(&tokenize(query, &model.vocab, cfg.max_query_len, Role::Encoder))?.data()));
    let mut scored = Vec::with_capacity(doc.num_sentences());
    for i in 0..doc.num_sentences() {
        let tok = tokenize(doc.sentence(i), &model.vocab, cfg.max_doc_len, Role::Encoder);
        let d = unit(to64(model.encode_document(&tok)?.pooled.data()));
        scored.push((i, q.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Attention-based sentence ranking given the gold document, with the
/// chunked bi-encoder baseline reported under `baseline.`.
pub fn evaluate_local<S: Scalar>(
    model: &GearModel<S>,
    triples: &[Triple],
    ks: &[usize],
    cfg: &LocateConfig,
) -> Result<EvalReport> {
    check_ks(ks)?;
    let queries = per_item(triples, |t| {
        let doc = t.document();
        let ranking = locate(model, &t.query, &doc, cfg)?.ranking;
        let baseline = chunked_ranking(model, &t.query, &doc, cfg)?;
        let mut metrics = retrieval_metrics("", &ranking, &t.unit_index, ks)?;
        metrics.extend(retrieval_metrics("baseline.", &baseline, &t.unit_index, ks)?);
        Ok(QueryRecord {
            query: t.query.clone(),
            gold: t.unit_index.to_string(),
            rank: ranking.iter().position(|&s| s == t.unit_index).map(|r| r + 1),
            prediction: ranking.first().map(|s| s.to_string()),
            metrics,
        })
    })?;
    Ok(EvalReport::assemble(Task::Local, model, queries))
}

/// Local Recall@k at every fusion layer (index 0 is layer 1).
pub fn local_recall_by_layer<S: Scalar>(
    model: &GearModel<S>,
    triples: &[Triple],
    k: usize,
    cfg: &LocateConfig,
) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = per_item(triples, |t| {
        let gold = [t.unit_index];
        locate_all_layers(model, &t.query, &t.document(), cfg)?
            .iter()
            .map(|r| recall_at_k(&r.ranking, &gold, k))
            .collect()
    })?;
    let n = per.len().max(1) as f64;
    Ok((0..model.config.layers).map(|l| per.iter().map(|p| p[l]).sum::<f64>() / n).collect())
}

/// Generates for every triple and scores against its target.
pub fn evaluate_generation<S: Scalar>(
    model: &GearModel<S>,
    triples: &[Triple],
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let queries = per_item(triples, |t| {
        let pred = generate(model, &t.query, &t.document(), cfg)?;
        let metrics = BTreeMap::from([
            ("EM".to_string(), exact_match(&pred, &t.target)),
            ("F1".to_string(), f1(&pred, &t.target)),
            ("ROUGE-1".to_string(), rouge_1(&pred, &t.target)),
            ("ROUGE-L".to_string(), rouge_l(&pred, &t.target)),
        ]);
        Ok(QueryRecord { query: t.query.clone(), gold: t.target.clone(), rank: None, prediction: Some(pred), metrics })
    })?;
    Ok(EvalReport::assemble(Task::Generation, model, queries))
}
