use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{contrastive_loss, lm_loss, total_loss, ContrastiveInputs};
use super::optim::{clip_global_norm, lr_at, momentum_update, soft_label_weight, AdamW};
use super::queue::NegativeQueue;
use crate::error::{GearError, Result};
use crate::model::network::{self, SeqBatch, Side};
use crate::model::{GearModel, ParamStore};
use crate::records::Triple;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{tokenize, Role, TokenizedText};

/// Losses and schedule values of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub l_cl: f64,
    pub l_lm: f64,
    pub l_total: f64,
    pub lr: f64,
    pub soft_weight: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

struct Prepared<S> {
    queries: SeqBatch,
    docs: SeqBatch,
    targets: Vec<TokenizedText>,
    keys: Vec<String>,
    mq: Tensor<S>,
    md: Tensor<S>,
    soft_weight: f64,
}

struct LossVars {
    total: Var,
    l_cl: Var,
    l_lm: Option<Var>,
}

/// Everything a training run mutates.
pub struct Trainer<S> {
    pub model: GearModel<S>,
    pub cfg: TrainConfig,
    pub queue: NegativeQueue<S>,
    opt: AdamW<S>,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
}

/// Mean-pooled, unit-normalized embeddings `[B, h]` without gradients.
fn momentum_embeddings<S: Scalar>(
    model: &GearModel<S>,
    store: &ParamStore<S>,
    side: Side,
    seqs: &SeqBatch,
) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let states = network::encoder(&mut g, store, &model.config, side, seqs)?;
    let pooled = network::pool(&mut g, states, seqs)?;
    let unit = g.l2_normalize(pooled)?;
    Ok(g.value(unit).clone())
}

impl<S: Scalar> Trainer<S> {
    /// `dataset_len` fixes the number of steps per epoch for the schedule.
    pub fn new(model: GearModel<S>, cfg: TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len == 0 {
            return Err(GearError::EmptySequence("training set is empty".into()));
        }
        for (what, len) in [("query", cfg.max_query_len), ("document", cfg.max_doc_len), ("target", cfg.max_target_len)]
        {
            if len > model.config.max_positions {
                return Err(GearError::Config(format!(
                    "max {what} length {len} exceeds max positions {}",
                    model.config.max_positions
                )));
            }
        }
        let steps_per_epoch = dataset_len.div_ceil(cfg.batch_size);
        let queue = NegativeQueue::new(cfg.queue_size, model.config.hidden);
        Ok(Self {
            model,
            queue,
            opt: AdamW::new(),
            step: 0,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
            cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn tokenize_batch(&self, batch: &[Triple]) -> (Vec<TokenizedText>, Vec<TokenizedText>, Vec<TokenizedText>) {
        let v = &self.model.vocab;
        let q = batch.iter().map(|t| tokenize(&t.query, v, self.cfg.max_query_len, Role::Encoder)).collect();
        let d = batch.iter().map(|t| tokenize(&t.doc_text, v, self.cfg.max_doc_len, Role::Encoder)).collect();
        let y = batch.iter().map(|t| tokenize(&t.target, v, self.cfg.max_target_len, Role::DecoderTarget)).collect();
        (q, d, y)
    }

    fn prepare(&self, batch: &[Triple]) -> Result<Prepared<S>> {
        if batch.is_empty() {
            return Err(GearError::EmptySequence("empty training batch".into()));
        }
        let (qt, dt, targets) = self.tokenize_batch(batch);
        let queries = SeqBatch::new(&qt.iter().collect::<Vec<_>>())?;
        let docs = SeqBatch::new(&dt.iter().collect::<Vec<_>>())?;
        let mq = momentum_embeddings(&self.model, &self.model.momentum, Side::Query, &queries)?;
        let md = momentum_embeddings(&self.model, &self.model.momentum, Side::Document, &docs)?;
        Ok(Prepared {
            queries,
            docs,
            targets,
            keys: batch.iter().map(|t| t.doc_id.clone()).collect(),
            mq,
            md,
            soft_weight: soft_label_weight(
                self.step,
                self.steps_per_epoch,
                self.cfg.soft_label_max,
                self.cfg.soft_label_ramp_epochs,
            ),
        })
    }

    /// Builds the total loss of a prepared batch into `g`.
    fn forward(&self, g: &mut Graph<S>, prep: &Prepared<S>) -> Result<LossVars> {
        let (cfg, mcfg, p) = (&self.cfg, &self.model.config, &self.model.params);
        let xq = network::embed(g, p, mcfg, "query", &prep.queries)?;
        let q_states = network::encoder_from(g, p, mcfg, Side::Query, xq, &prep.queries)?;
        let q_pool = network::pool(g, q_states, &prep.queries)?;
        let q = g.l2_normalize(q_pool)?;
        let d_states = network::encoder(g, p, mcfg, Side::Document, &prep.docs)?;
        let d_pool = network::pool(g, d_states, &prep.docs)?;
        let d = g.l2_normalize(d_pool)?;
        let tau = p.var(g, "tau");
        let l_cl = contrastive_loss(
            g,
            ContrastiveInputs {
                q,
                d,
                mq: &prep.mq,
                md: &prep.md,
                queue: &self.queue,
                tau,
                soft_weight: prep.soft_weight,
                doc_keys: cfg.mask_duplicate_docs.then_some(prep.keys.as_slice()),
            },
        )?;
        if cfg.alpha == 0.0 {
            return Ok(LossVars { total: l_cl, l_cl, l_lm: None });
        }
        let (fused, _) = network::fusion_from(g, p, mcfg, xq, &prep.queries, d_states, &prep.docs)?;
        let targets: Vec<&TokenizedText> = prep.targets.iter().collect();
        let l_lm = lm_loss(g, p, mcfg, fused, &prep.queries, &targets)?;
        let weighted = g.scale(l_lm, S::from_f64_lossy(cfg.alpha));
        Ok(LossVars { total: g.add(l_cl, weighted)?, l_cl, l_lm: Some(l_lm) })
    }

    fn graph(&self, recording: bool) -> Graph<S> {
        let train = self.model.config.dropout > 0.0;
        Graph::with_options(recording, train, self.cfg.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9))
    }

    /// Total loss on `batch` at the current parameters, without updating.
    pub fn loss(&self, batch: &[Triple]) -> Result<f64> {
        let prep = self.prepare(batch)?;
        let mut g = self.graph(false);
        let vars = self.forward(&mut g, &prep)?;
        Ok(g.value(vars.total).item().to_f64_lossy())
    }

    /// Gradients of the total loss on `batch`, by parameter name.
    pub fn gradients(&self, batch: &[Triple]) -> Result<Vec<(String, Tensor<S>)>> {
        let prep = self.prepare(batch)?;
        let mut g = self.graph(true);
        let vars = self.forward(&mut g, &prep)?;
        g.backward(vars.total)?;
        Ok(g.named_grads().into_iter().map(|(n, t)| (n, t.clone())).collect())
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &[Triple]) -> Result<StepReport> {
        let prep = self.prepare(batch)?;
        let mut g = self.graph(true);
        let vars = self.forward(&mut g, &prep)?;
        g.backward(vars.total)?;
        let l_cl = g.value(vars.l_cl).item().to_f64_lossy();
        let l_lm = vars.l_lm.map_or(0.0, |v| g.value(v).item().to_f64_lossy());
        let mut grads: Vec<(String, Tensor<S>)> = g.named_grads().into_iter().map(|(n, t)| (n, t.clone())).collect();
        drop(g);

        let cfg = &self.cfg;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(self.step, cfg, self.total_steps);
        self.opt.step(&mut self.model.params, &grads, lr, cfg);
        let (lo, hi) = (self.model.config.tau_min, self.model.config.tau_max);
        let tau_t = self.model.params.get_mut("tau").expect("tau parameter");
        let tau = tau_t.item().to_f64_lossy().clamp(lo, hi);
        tau_t.data_mut()[0] = S::from_f64_lossy(tau);
        momentum_update(&self.model.params, &mut self.model.momentum, cfg.momentum);
        self.queue.push(&prep.mq, &prep.md, &prep.keys)?;

        let report = StepReport {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            l_cl,
            l_lm,
            l_total: total_loss(l_cl, l_lm, cfg.alpha),
            lr,
            soft_weight: prep.soft_weight,
            grad_norm,
            tau,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs `epochs` passes over `data` in a seeded shuffled order and
    /// hands every report to `on_step`.
    pub fn fit(&mut self, data: &[Triple], mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut reports = Vec::with_capacity(self.total_steps);
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<Triple> = chunk.iter().map(|&i| data[i].clone()).collect();
                let r = self.train_step(&batch)?;
                on_step(&r);
                reports.push(r);
            }
        }
        Ok(reports)
    }
}
