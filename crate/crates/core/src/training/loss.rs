use super::queue::NegativeQueue;
use crate::error::{GearError, Result};
use crate::model::network::{self, SeqBatch};
use crate::model::{ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Target, Tensor, Var};
use crate::text::{TokenizedText, DEC, EOS, NUM_SPECIALS, PAD, UNK};

/// Logit offset for excluded negatives; finite so the graph stays finite.
const EXCLUDED: f64 = -1e4;

pub(crate) fn check_unit_rows<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-4) {
            return Err(GearError::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Inputs to the symmetric contrastive loss. `q`/`d` are online embeddings
/// `[B, h]` in the graph; `mq`/`md` the momentum embeddings of the same
/// batch. With `doc_keys`, a negative whose key equals the anchor's is
/// excluded from both the logits and the soft targets.
pub struct ContrastiveInputs<'a, S> {
    pub q: Var,
    pub d: Var,
    pub mq: &'a Tensor<S>,
    pub md: &'a Tensor<S>,
    pub queue: &'a NegativeQueue<S>,
    pub tau: Var,
    pub soft_weight: f64,
    pub doc_keys: Option<&'a [String]>,
}

fn exclusion_mask<S: Scalar>(batch_keys: &[String], queue_keys: &[&str]) -> Option<Vec<S>> {
    let b = batch_keys.len();
    let n = b + queue_keys.len();
    let mut mask = vec![S::zero(); b * n];
    let mut any = false;
    for i in 0..b {
        for j in 0..n {
            let key = if j < b { batch_keys[j].as_str() } else { queue_keys[j - b] };
            if j != i && key == batch_keys[i] {
                mask[i * n + j] = S::from_f64_lossy(EXCLUDED);
                any = true;
            }
        }
    }
    any.then_some(mask)
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `(1-w)·onehot(i) + w·softmax(m_anchor · m_keysᵀ / τ)`
fn soft_targets<S: Scalar>(
    m_anchor: &Tensor<S>,
    m_keys: &[&Tensor<S>],
    tau: f64,
    w: f64,
    mask: Option<&[S]>,
) -> Result<Tensor<S>> {
    let b = m_anchor.rows();
    let n: usize = m_keys.iter().map(|k| k.rows()).sum();
    let mut sims = Vec::with_capacity(b * n);
    for i in 0..b {
        for k in m_keys {
            for j in 0..k.rows() {
                let s = crate::tensor::dot(m_anchor.row(i), k.row(j)).to_f64_lossy() / tau;
                sims.push(s);
            }
        }
    }
    if let Some(mask) = mask {
        for (s, m) in sims.iter_mut().zip(mask) {
            *s += m.to_f64_lossy();
        }
    }
    softmax_rows(&mut sims, n);
    let data = sims
        .iter()
        .enumerate()
        .map(|(idx, &p)| {
            let onehot = if idx / n == idx % n { 1.0 } else { 0.0 };
            S::from_f64_lossy((1.0 - w) * onehot + w * p)
        })
        .collect();
    Tensor::new(vec![b, n], data)
}

#[allow(clippy::too_many_arguments)]
fn direction<S: Scalar>(
    g: &mut Graph<S>,
    anchor: Var,
    m_anchor: &Tensor<S>,
    positives: Var,
    m_positives: &Tensor<S>,
    queue_rows: Option<&Tensor<S>>,
    mask: Option<&[S]>,
    tau: Var,
    w: f64,
) -> Result<Var> {
    let b = m_anchor.rows();
    let keys = match queue_rows {
        Some(q) => {
            let qv = g.constant(q.clone());
            g.concat_rows(&[positives, qv])?
        }
        None => positives,
    };
    let sims = g.matmul_nt(anchor, keys)?;
    let mut logits = g.div_scalar(sims, tau)?;
    let n = g.shape(logits)[1];
    if let Some(mask) = mask {
        let m = g.constant(Tensor::new(vec![b, n], mask.to_vec())?);
        logits = g.add(logits, m)?;
    }
    let target = if w == 0.0 {
        Target::Hard { classes: (0..b).collect(), ignore: None }
    } else {
        let tau_v = g.value(tau).item().to_f64_lossy();
        let mut keys = vec![m_positives];
        keys.extend(queue_rows);
        Target::Soft(soft_targets(m_anchor, &keys, tau_v, w, mask)?)
    };
    g.cross_entropy(logits, &target)
}

/// Symmetric InfoNCE over in-batch and queued negatives with soft targets
/// from the momentum embeddings; the mean of both directions.
pub fn contrastive_loss<S: Scalar>(g: &mut Graph<S>, inp: ContrastiveInputs<'_, S>) -> Result<Var> {
    let b = inp.mq.rows();
    let h = inp.queue.dim();
    for (t, what) in [
        (g.value(inp.q), "query embedding"),
        (g.value(inp.d), "document embedding"),
        (inp.mq, "momentum query embedding"),
        (inp.md, "momentum document embedding"),
    ] {
        if t.shape() != [b, h] {
            return Err(GearError::shape("contrastive loss", format!("{what} {:?}, expected [{b}, {h}]", t.shape())));
        }
        check_unit_rows(t, what)?;
    }
    if !(0.0..1.0).contains(&inp.soft_weight) {
        return Err(GearError::Contract(format!("soft label weight {} outside [0, 1)", inp.soft_weight)));
    }
    if g.value(inp.tau).item().to_f64_lossy() <= 0.0 {
        return Err(GearError::Contract("temperature must be positive".into()));
    }
    let mask = match inp.doc_keys {
        Some(keys) if keys.len() == b => exclusion_mask::<S>(keys, &inp.queue.keys()),
        Some(keys) => {
            return Err(GearError::shape("contrastive loss", format!("{} keys for batch {b}", keys.len())));
        }
        None => None,
    };
    let queue_d = inp.queue.doc_rows();
    let queue_q = inp.queue.query_rows();
    let q2d = direction(g, inp.q, inp.mq, inp.d, inp.md, queue_d.as_ref(), mask.as_deref(), inp.tau, inp.soft_weight)?;
    let d2q = direction(g, inp.d, inp.md, inp.q, inp.mq, queue_q.as_ref(), mask.as_deref(), inp.tau, inp.soft_weight)?;
    let sum = g.add(q2d, d2q)?;
    Ok(g.scale(sum, S::from_f64_lossy(0.5)))
}

fn unpadded(t: &TokenizedText) -> Vec<usize> {
    t.ids.iter().zip(&t.mask).filter(|(_, m)| **m == 1).map(|(i, _)| *i).collect()
}

/// Teacher-forced decoder inputs (`[DEC] + target[..n-1]`) and targets.
pub fn teacher_forcing(targets: &[&TokenizedText]) -> Result<(SeqBatch, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(targets.len());
    for (n, t) in targets.iter().enumerate() {
        let ids = unpadded(t);
        if ids.last() != Some(&EOS) {
            return Err(GearError::Contract(format!("target {n} does not end with [EOS]")));
        }
        if !ids.iter().any(|&i| i >= NUM_SPECIALS || i == UNK) {
            return Err(GearError::EmptySequence(format!("target {n} has no content token")));
        }
        let mut row = vec![DEC];
        row.extend_from_slice(&ids[..ids.len() - 1]);
        inputs.push(row);
    }
    let len = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut classes = Vec::with_capacity(inputs.len() * len);
    for (n, t) in targets.iter().enumerate() {
        let ids = unpadded(t);
        classes.extend(ids.iter().copied().chain(std::iter::repeat(PAD)).take(len));
        debug_assert_eq!(ids.len(), inputs[n].len());
    }
    let batch = SeqBatch::from_ids(&inputs)?;
    Ok((batch, classes))
}

/// Mean next-token cross-entropy of `targets` given fused query states.
pub fn lm_loss<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    cfg: &ModelConfig,
    fused: Var,
    queries: &SeqBatch,
    targets: &[&TokenizedText],
) -> Result<Var> {
    let (inputs, classes) = teacher_forcing(targets)?;
    let logits = network::decoder(g, p, cfg, fused, queries, &inputs)?;
    g.cross_entropy(logits, &Target::Hard { classes, ignore: Some(PAD) })
}

pub fn total_loss(l_cl: f64, l_lm: f64, alpha: f64) -> f64 {
    l_cl + alpha * l_lm
}
