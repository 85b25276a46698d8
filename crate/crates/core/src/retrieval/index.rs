use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, GearError, Result};
use crate::model::GearModel;
use crate::scalar::Scalar;
use crate::text::{tokenize, Document, Role};

const MAGIC: &[u8; 5] = b"GIDX1";

/// Unit-normalized pooled document embeddings with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub ordinal: usize,
    pub score: f64,
}

/// Ranked hits, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.id == id)
    }
}

fn unit_f32<S: Scalar>(v: &[S]) -> Vec<f32> {
    let n = v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| (x.to_f64_lossy() / n) as f32).collect()
}

/// Encodes every document with the document encoder, one at a time so a
/// row never depends on what else is in the corpus.
pub fn build_index<S: Scalar>(model: &GearModel<S>, corpus: &[Document], max_len: usize) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(GearError::EmptySequence("cannot index an empty corpus".into()));
    }
    let rows: Vec<Vec<f32>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let tok = tokenize(&d.text, &model.vocab, max_len, Role::Encoder);
            let e = model.encode_document(&tok).map_err(|e| GearError::Item { index: i, source: Box::new(e) })?;
            Ok(unit_f32(e.pooled.data()))
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingIndex {
        dim: model.config.hidden,
        ids: corpus.iter().map(|d| d.id.clone()).collect(),
        rows: rows.concat(),
        fingerprint: model.fingerprint(),
    })
}

impl EmbeddingIndex {
    /// Wraps precomputed rows `[ids.len(), dim]`; each must be unit length.
    pub fn from_rows(ids: Vec<String>, dim: usize, rows: Vec<f32>, fingerprint: u64) -> Result<Self> {
        if dim == 0 || rows.len() != ids.len() * dim {
            return Err(GearError::shape(
                "index",
                format!("{} values for {} ids of width {dim}", rows.len(), ids.len()),
            ));
        }
        for (i, r) in rows.chunks_exact(dim).enumerate() {
            let n = r.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(GearError::Contract(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self { dim, ids, rows, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Refuses a model other than the one that built the index.
    pub fn check_model<S: Scalar>(&self, model: &GearModel<S>) -> Result<()> {
        let found = model.fingerprint();
        if found != self.fingerprint {
            return Err(GearError::Fingerprint { expected: self.fingerprint, found });
        }
        Ok(())
    }

    /// Exact top-`k` by inner product; ties go to the lower ordinal.
    pub fn search_embedding(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(GearError::shape("search", format!("query width {} vs index {}", query.len(), self.dim)));
        }
        if k == 0 {
            return Err(GearError::Contract("k must be at least 1".into()));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, self.row(i).iter().zip(query).map(|(&r, &q)| f64::from(r) * q).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(SearchResult {
            hits: scored.into_iter().map(|(i, score)| Hit { id: self.ids[i].clone(), ordinal: i, score }).collect(),
        })
    }

    /// Encodes `query` with the query encoder and scans the index.
    pub fn search<S: Scalar>(
        &self,
        model: &GearModel<S>,
        query: &str,
        k: usize,
        max_len: usize,
    ) -> Result<SearchResult> {
        self.check_model(model)?;
        let tok = tokenize(query, &model.vocab, max_len, Role::Encoder);
        let q = model.encode_query(&tok)?;
        let unit: Vec<f64> = unit_f32(q.data()).into_iter().map(f64::from).collect();
        self.search_embedding(&unit, k)
    }

    /// `GIDX1`, N, h, fingerprint, rows, id table, CRC-32 of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |needed: usize| CheckpointError::Truncated { needed, have: bytes.len() };
        if bytes.len() < MAGIC.len() + 28 {
            return Err(truncated(MAGIC.len() + 28).into());
        }
        if &bytes[..5] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(CheckpointError::Checksum.into());
        }
        let u64_at = |at: usize| u64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes"));
        let (n, dim, fingerprint) = (u64_at(5) as usize, u64_at(13) as usize, u64_at(21));
        let mut at = 29;
        let row_bytes = n.checked_mul(dim).and_then(|x| x.checked_mul(4)).ok_or_else(|| truncated(usize::MAX))?;
        let raw = body.get(at..at + row_bytes).ok_or_else(|| truncated(at + row_bytes + 4))?;
        let rows = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        at += row_bytes;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = body.get(at..at + 4).ok_or_else(|| truncated(at + 8))?;
            let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
            at += 4;
            let s = body.get(at..at + len).ok_or_else(|| truncated(at + len + 4))?;
            ids.push(String::from_utf8(s.to_vec()).map_err(|e| CheckpointError::Header(e.to_string()))?);
            at += len;
        }
        if at != body.len() {
            return Err(CheckpointError::Header(format!("{} unexpected trailing bytes", body.len() - at)).into());
        }
        Ok(Self { dim, ids, rows, fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| GearError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| GearError::io(path, e))?)
    }
}
