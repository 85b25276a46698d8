//! The jointly trained retriever/generator network.

mod attention_map;
pub mod checkpoint;
mod config;
mod init;
pub mod network;
mod params;

pub use attention_map::AttentionMap;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use init::{init_params, momentum_params, param_shapes, MOMENTUM_PREFIXES};
pub use network::{SeqBatch, Side};
pub use params::ParamStore;

use sha2::{Digest, Sha256};

use crate::error::{GearError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::text::{TokenizedText, Vocabulary, DEC};

/// Output of the document encoder for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDoc<S> {
    pub pooled: Tensor<S>,
    /// `[len, h]`
    pub states: Tensor<S>,
    pub mask: Vec<bool>,
}

/// Fusion output for one (query, document) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused<S> {
    /// `[q_len, h]`
    pub states: Tensor<S>,
    pub query_mask: Vec<bool>,
    pub attn: AttentionMap,
}

/// Configuration, vocabulary, online parameters and their momentum mirror.
#[derive(Debug, Clone)]
pub struct GearModel<S> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<S>,
    pub momentum: ParamStore<S>,
}

impl<S: Scalar> GearModel<S> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(GearError::Config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = init_params(&config, seed);
        let momentum = momentum_params(&params);
        Ok(Self { config, vocab, params, momentum })
    }

    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        params: ParamStore<S>,
        momentum: ParamStore<S>,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in param_shapes(&config) {
            let check = |store: &ParamStore<S>, required: bool| -> Result<()> {
                match store.get(&name) {
                    Some(t) if t.shape() != shape.as_slice() => {
                        Err(GearError::shape("parameters", format!("{name}: {:?} vs {:?}", t.shape(), shape)))
                    }
                    None if required => Err(GearError::shape("parameters", format!("{name} missing"))),
                    _ => Ok(()),
                }
            };
            check(&params, true)?;
            check(&momentum, MOMENTUM_PREFIXES.iter().any(|p| name.starts_with(p)))?;
        }
        Ok(Self { config, vocab, params, momentum })
    }

    pub fn cast<T: Scalar>(&self) -> GearModel<T> {
        GearModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            momentum: self.momentum.cast(),
        }
    }

    pub fn tau(&self) -> S {
        self.params.expect("tau").item()
    }

    /// Digest of configuration, vocabulary and online parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.vocab.hash().to_le_bytes());
        self.params.digest(&mut h);
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    fn encode_with(&self, store: &ParamStore<S>, side: Side, toks: &[&TokenizedText]) -> Result<Vec<EncodedDoc<S>>> {
        let seqs = SeqBatch::new(toks)?;
        let mut g = Graph::inference();
        let states = network::encoder(&mut g, store, &self.config, side, &seqs)?;
        let pooled = network::pool(&mut g, states, &seqs)?;
        let (h, t) = (self.config.hidden, seqs.len);
        let sv = g.value(states).data();
        let pv = g.value(pooled).data();
        Ok((0..seqs.batch)
            .map(|b| {
                let n = toks[b].len();
                EncodedDoc {
                    pooled: Tensor::new(vec![h], pv[b * h..(b + 1) * h].to_vec()).expect("pooled row"),
                    states: Tensor::new(vec![n, h], sv[b * t * h..(b * t + n) * h].to_vec()).expect("state rows"),
                    mask: seqs.mask[b * t..b * t + n].to_vec(),
                }
            })
            .collect())
    }

    /// Pooled embedding and final token states from the document encoder.
    pub fn encode_document(&self, tok: &TokenizedText) -> Result<EncodedDoc<S>> {
        Ok(self.encode_with(&self.params, Side::Document, &[tok])?.remove(0))
    }

    /// Pooled query-encoder embedding.
    pub fn encode_query(&self, tok: &TokenizedText) -> Result<Tensor<S>> {
        Ok(self.encode_with(&self.params, Side::Query, &[tok])?.remove(0).pooled)
    }

    /// Batched encoding; padding inside the batch does not change results.
    pub fn encode_batch(&self, side: Side, toks: &[&TokenizedText]) -> Result<Vec<EncodedDoc<S>>> {
        self.encode_with(&self.params, side, toks)
    }

    /// Pooled embedding from the momentum copy of `side`.
    pub fn momentum_encode(&self, side: Side, tok: &TokenizedText) -> Result<Tensor<S>> {
        Ok(self.encode_with(&self.momentum, side, &[tok])?.remove(0).pooled)
    }

    /// Runs the fusion pass of `tok_q` against encoded document states.
    pub fn fuse(&self, tok_q: &TokenizedText, doc: &EncodedDoc<S>) -> Result<Fused<S>> {
        if doc.states.rows() != doc.mask.len() || doc.states.cols() != self.config.hidden {
            return Err(GearError::shape(
                "fuse",
                format!("document states {:?} with {} mask entries", doc.states.shape(), doc.mask.len()),
            ));
        }
        if !doc.mask.iter().any(|&m| m) {
            return Err(GearError::EmptySequence("document mask has no unpadded position".into()));
        }
        let queries = SeqBatch::new(&[tok_q])?;
        let docs = SeqBatch { ids: vec![0; doc.mask.len()], mask: doc.mask.clone(), batch: 1, len: doc.mask.len() };
        let mut g = Graph::inference();
        let ds = g.constant(doc.states.clone());
        let x = network::embed(&mut g, &self.params, &self.config, "query", &queries)?;
        let (fused, maps) = network::fusion_from(&mut g, &self.params, &self.config, x, &queries, ds, &docs)?;
        let mut weights = Vec::with_capacity(maps.len() * self.config.heads * queries.len * docs.len);
        for m in maps {
            let (_, probs) = g.attention_probs(m).expect("attention node keeps its probabilities");
            weights.extend(probs.iter().map(|p| p.to_f64_lossy()));
        }
        let attn = AttentionMap::new(self.config.layers, self.config.heads, queries.mask.clone(), docs.mask, weights)?;
        Ok(Fused { states: g.value(fused).clone(), query_mask: queries.mask, attn })
    }

    /// Next-token logits `[V]` after `prefix`, which must start with `[DEC]`.
    pub fn decode_step(&self, fused: &Fused<S>, prefix: &[usize]) -> Result<Tensor<S>> {
        let rows = self.decode_logits(fused, prefix)?;
        let v = self.config.vocab_size;
        let n = prefix.len();
        Tensor::new(vec![v], rows.data()[(n - 1) * v..n * v].to_vec())
    }

    /// Logits `[len, V]` for every prefix position.
    pub fn decode_logits(&self, fused: &Fused<S>, prefix: &[usize]) -> Result<Tensor<S>> {
        if prefix.first() != Some(&DEC) {
            return Err(GearError::Contract("decoder prefix must start with [DEC]".into()));
        }
        if fused.states.rows() != fused.query_mask.len() {
            return Err(GearError::shape("decode", "fused states and query mask disagree"));
        }
        let queries = SeqBatch {
            ids: vec![0; fused.query_mask.len()],
            mask: fused.query_mask.clone(),
            batch: 1,
            len: fused.query_mask.len(),
        };
        let inputs = SeqBatch::from_ids(&[prefix.to_vec()])?;
        let mut g = Graph::inference();
        let f = g.constant(fused.states.clone());
        let logits = network::decoder(&mut g, &self.params, &self.config, f, &queries, &inputs)?;
        Ok(g.value(logits).clone())
    }
}
