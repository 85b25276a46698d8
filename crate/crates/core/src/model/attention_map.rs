use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};

/// Fusion cross-attention probabilities for one (query, document) pair,
/// laid out `[layer][head][query position][document position]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layers: usize,
    pub heads: usize,
    pub q_len: usize,
    pub d_len: usize,
    pub weights: Vec<f64>,
    pub query_mask: Vec<bool>,
    pub doc_mask: Vec<bool>,
}

impl AttentionMap {
    pub fn new(
        layers: usize,
        heads: usize,
        query_mask: Vec<bool>,
        doc_mask: Vec<bool>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let (q_len, d_len) = (query_mask.len(), doc_mask.len());
        if weights.len() != layers * heads * q_len * d_len {
            return Err(GearError::shape(
                "attention map",
                format!("{} weights for {layers}x{heads}x{q_len}x{d_len}", weights.len()),
            ));
        }
        Ok(Self { layers, heads, q_len, d_len, weights, query_mask, doc_mask })
    }

    pub fn weight(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        self.weights[((layer * self.heads + head) * self.q_len + i) * self.d_len + j]
    }

    /// Attention row of one (layer, head, query position).
    pub fn row(&self, layer: usize, head: usize, i: usize) -> &[f64] {
        let start = ((layer * self.heads + head) * self.q_len + i) * self.d_len;
        &self.weights[start..start + self.d_len]
    }

    /// Largest deviation from the normalization and padding invariants:
    /// unpadded rows sum to one and padded columns hold zero.
    pub fn max_invariant_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in (0..self.q_len).filter(|&i| self.query_mask[i]) {
                    let row = self.row(l, h, i);
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    for (j, &w) in row.iter().enumerate() {
                        if !self.doc_mask[j] {
                            worst = worst.max(w.abs());
                        }
                    }
                }
            }
        }
        worst
    }
}
