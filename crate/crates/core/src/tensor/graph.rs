use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::Op;
use super::Tensor;
use crate::error::{GearError, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Tape of operations. Creation order is a valid topological order, so
/// backward is a single reverse sweep.
pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
    recording: bool,
    train: bool,
    pub(crate) rng: ChaCha8Rng,
    named: HashMap<String, Var>,
    named_order: Vec<String>,
    grads: Vec<Option<Tensor<S>>>,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<S: Scalar> Graph<S> {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Self::with_options(true, false, 0)
    }

    /// A graph that only evaluates values; no node ever requires a gradient.
    pub fn inference() -> Self {
        Self::with_options(false, false, 0)
    }

    /// `train` enables dropout, seeded by `seed`.
    pub fn with_options(recording: bool, train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            recording,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            named: HashMap::new(),
            named_order: Vec::new(),
            grads: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op (index, name) whose forward output held NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    /// A leaf; `requires_grad` is ignored on non-recording graphs.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.recording;
        self.push_node(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A named trainable leaf, created once per graph. Every later request
    /// for the same name returns the same node, so parameter sharing is
    /// visible to backward as gradient accumulation.
    pub fn named_leaf(&mut self, name: &str, make: impl FnOnce() -> Tensor<S>) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(make(), true);
        self.named.insert(name.to_string(), v);
        self.named_order.push(name.to_string());
        v
    }

    pub fn named_var(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Names of every named leaf, in creation order.
    pub fn named_leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named_order.iter().map(move |n| (n.as_str(), self.named[n]))
    }

    /// A non-differentiable copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { op.strip() };
        self.push_node(value, op, rg)
    }

    fn push_node(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(idx)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves are kept and
    /// can be read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(GearError::Contract("backward on a non-recording graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GearError::shape("backward", "loss must be a single value"));
        }
        if let Some((index, op)) = self.first_nonfinite {
            return Err(GearError::NonFinite { index, op });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.backward_rule(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(S::one(), &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of named leaves reached by the last backward sweep.
    pub fn named_grads(&self) -> Vec<(String, &Tensor<S>)> {
        self.named_order.iter().filter_map(|name| self.grad(self.named[name]).map(|g| (name.clone(), g))).collect()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}
