//! Graph builders for the encoders, the fusion pass and the decoder.
//!
//! Every function reads parameters through [`ParamStore::var`], so a name
//! used twice in one graph is one leaf and its gradient accumulates.

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{GearError, Result};
use crate::scalar::Scalar;
use crate::tensor::{AttentionSpec, Graph, Var};
use crate::text::{TokenizedText, PAD};

/// Right-padded token ids for a batch of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(seqs: &[&TokenizedText]) -> Result<Self> {
        let len = seqs.iter().map(|t| t.len()).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(GearError::EmptySequence("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for (n, t) in seqs.iter().enumerate() {
            if t.mask.len() != t.ids.len() {
                return Err(GearError::shape("batch", format!("sequence {n}: mask/ids length differ")));
            }
            if !t.mask.contains(&1) {
                return Err(GearError::EmptySequence(format!("sequence {n} has no unpadded token")));
            }
            for i in 0..len {
                ids.push(t.ids.get(i).copied().unwrap_or(PAD));
                mask.push(t.mask.get(i).is_some_and(|&m| m == 1));
            }
        }
        Ok(Self { ids, mask, batch: seqs.len(), len })
    }

    /// Builds a batch from raw id rows, all unpadded.
    pub fn from_ids(rows: &[Vec<usize>]) -> Result<Self> {
        let toks: Vec<TokenizedText> = rows
            .iter()
            .map(|r| TokenizedText { ids: r.clone(), mask: vec![1; r.len()], offsets: vec![None; r.len()] })
            .collect();
        Self::new(&toks.iter().collect::<Vec<_>>())
    }

    pub fn mask_values<S: Scalar>(&self) -> Vec<S> {
        self.mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }

    fn check_len(&self, cfg: &ModelConfig) -> Result<()> {
        if self.len > cfg.max_positions {
            return Err(GearError::TooLong { len: self.len, max: cfg.max_positions });
        }
        Ok(())
    }
}

/// Which encoder stack a pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Query => "query",
            Side::Document => "doc",
        }
    }
}

fn layer_norm<S: Scalar>(g: &mut Graph<S>, p: &ParamStore<S>, cfg: &ModelConfig, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(g, &format!("{name}.g"));
    let bias = p.var(g, &format!("{name}.b"));
    g.layer_norm(x, gain, bias, cfg.layer_norm_eps)
}

fn proj<S: Scalar>(g: &mut Graph<S>, p: &ParamStore<S>, name: &str, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = p.var(g, &format!("{name}.{w}"));
    let b = p.var(g, &format!("{name}.{b}"));
    g.linear(x, w, b)
}

/// Multi-head attention sublayer with input and output projections.
/// Returns the projected output and the raw attention node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
    kv: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
    key_mask: &[bool],
    causal: bool,
) -> Result<(Var, Var)> {
    let q = proj(g, p, name, x, "wq", "bq")?;
    let k = proj(g, p, name, kv, "wk", "bk")?;
    let v = proj(g, p, name, kv, "wv", "bv")?;
    let spec = AttentionSpec { batch, q_len, k_len, heads: cfg.heads, key_mask: key_mask.to_vec(), causal };
    let a = g.attention(q, k, v, spec)?;
    Ok((proj(g, p, name, a, "wo", "bo")?, a))
}

fn feed_forward<S: Scalar>(g: &mut Graph<S>, p: &ParamStore<S>, name: &str, x: Var) -> Result<Var> {
    let h = proj(g, p, name, x, "w1", "b1")?;
    let h = g.gelu(h);
    proj(g, p, name, h, "w2", "b2")
}

/// `norm(x + dropout(y))`
fn residual<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    norm: &str,
    x: Var,
    y: Var,
) -> Result<Var> {
    let y = g.dropout(y, cfg.dropout);
    let s = g.add(x, y)?;
    layer_norm(g, p, cfg, norm, s)
}

/// Token plus position embeddings, normalized: `[batch*len, h]`.
pub fn embed<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    seqs: &SeqBatch,
) -> Result<Var> {
    seqs.check_len(cfg)?;
    if let Some(&bad) = seqs.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(GearError::Contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let table = p.var(g, "embed.tokens");
    let tok = g.embedding(table, &seqs.ids)?;
    let pos_table = p.var(g, &format!("{prefix}.pos"));
    let pos = g.embedding(pos_table, &seqs.positions())?;
    let x = g.add(tok, pos)?;
    let x = layer_norm(g, p, cfg, &format!("{prefix}.emb_ln"), x)?;
    Ok(g.dropout(x, cfg.dropout))
}

fn encoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    name: &str,
    x: Var,
    seqs: &SeqBatch,
) -> Result<Var> {
    let (a, _) =
        attention_block(g, p, cfg, &format!("{name}.attn"), x, x, seqs.batch, seqs.len, seqs.len, &seqs.mask, false)?;
    let x = residual(g, p, cfg, &format!("{name}.attn_ln"), x, a)?;
    let f = feed_forward(g, p, &format!("{name}.ffn"), x)?;
    residual(g, p, cfg, &format!("{name}.ffn_ln"), x, f)
}

/// Runs the encoder stack of `side` over already embedded input `x`.
pub fn encoder_from<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    side: Side,
    x: Var,
    seqs: &SeqBatch,
) -> Result<Var> {
    let mut x = x;
    for l in 0..cfg.layers {
        x = encoder_layer(g, p, cfg, &format!("{}.layer{l}", side.prefix()), x, seqs)?;
    }
    Ok(x)
}

/// Token states `[batch*len, h]` of one encoder.
pub fn encoder<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    side: Side,
    seqs: &SeqBatch,
) -> Result<Var> {
    let x = embed(g, p, cfg, side.prefix(), seqs)?;
    encoder_from(g, p, cfg, side, x, seqs)
}

/// Masked mean over each sequence: `[batch, h]`.
pub fn pool<S: Scalar>(g: &mut Graph<S>, states: Var, seqs: &SeqBatch) -> Result<Var> {
    g.masked_mean_pool(states, &seqs.mask_values::<S>(), seqs.len)
}

/// Query-side stack with a cross-attention sublayer per layer. `x` is the
/// embedded query; `doc_states` are final document states `[batch*dlen, h]`.
/// Returns the fused states and one attention node per layer.
pub fn fusion_from<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    x: Var,
    queries: &SeqBatch,
    doc_states: Var,
    docs: &SeqBatch,
) -> Result<(Var, Vec<Var>)> {
    if queries.batch != docs.batch {
        return Err(GearError::shape("fuse", format!("{} queries vs {} documents", queries.batch, docs.batch)));
    }
    let want = [docs.batch * docs.len, cfg.hidden];
    if g.shape(doc_states) != want {
        return Err(GearError::shape("fuse", format!("document states {:?} vs mask {:?}", g.shape(doc_states), want)));
    }
    let mut x = x;
    let mut maps = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let q = format!("query.layer{l}");
        let f = format!("fusion.layer{l}");
        let (a, _) = attention_block(
            g,
            p,
            cfg,
            &format!("{q}.attn"),
            x,
            x,
            queries.batch,
            queries.len,
            queries.len,
            &queries.mask,
            false,
        )?;
        x = residual(g, p, cfg, &format!("{q}.attn_ln"), x, a)?;
        let (c, probs) = attention_block(
            g,
            p,
            cfg,
            &format!("{f}.xattn"),
            x,
            doc_states,
            queries.batch,
            queries.len,
            docs.len,
            &docs.mask,
            false,
        )?;
        maps.push(probs);
        x = residual(g, p, cfg, &format!("{f}.xattn_ln"), x, c)?;
        let h = feed_forward(g, p, &format!("{q}.ffn"), x)?;
        x = residual(g, p, cfg, &format!("{q}.ffn_ln"), x, h)?;
    }
    Ok((x, maps))
}

/// Next-token logits `[batch*len, V]` for decoder inputs `inputs`,
/// cross-attending to `fused` (`[batch*qlen, h]`, masked by `queries`).
pub fn decoder<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    fused: Var,
    queries: &SeqBatch,
    inputs: &SeqBatch,
) -> Result<Var> {
    if queries.batch != inputs.batch {
        return Err(GearError::shape("decode", format!("{} contexts vs {} prefixes", queries.batch, inputs.batch)));
    }
    let mut x = embed(g, p, cfg, "decoder", inputs)?;
    for l in 0..cfg.decoder_layers {
        let name = format!("decoder.layer{l}");
        let (a, _) = attention_block(
            g,
            p,
            cfg,
            &format!("{name}.attn"),
            x,
            x,
            inputs.batch,
            inputs.len,
            inputs.len,
            &inputs.mask,
            true,
        )?;
        x = residual(g, p, cfg, &format!("{name}.attn_ln"), x, a)?;
        let (c, _) = attention_block(
            g,
            p,
            cfg,
            &format!("{name}.xattn"),
            x,
            fused,
            inputs.batch,
            inputs.len,
            queries.len,
            &queries.mask,
            false,
        )?;
        x = residual(g, p, cfg, &format!("{name}.xattn_ln"), x, c)?;
        let h = feed_forward(g, p, &format!("{name}.ffn"), x)?;
        x = residual(g, p, cfg, &format!("{name}.ffn_ln"), x, h)?;
    }
    let table = p.var(g, "embed.tokens");
    let logits = g.matmul_nt(x, table)?;
    let bias = p.var(g, "decoder.out_bias");
    g.add_row(logits, bias)
}
