use rand::Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{GearError, Result};
use crate::scalar::{gemm, MatView, Scalar};

/// Shape and masking of one batched multi-head attention call.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows, all
/// with the same model width. `key_mask[b * k_len + j]` is `false` for
/// padded key positions, which receive exactly zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

/// Cross-entropy targets.
#[derive(Debug, Clone)]
pub enum Target<S> {
    /// One class per row; rows equal to `ignore` do not contribute.
    Hard { classes: Vec<usize>, ignore: Option<usize> },
    /// One distribution per row (`rows × classes`).
    Soft(Tensor<S>),
}

pub(crate) enum Op<S> {
    Leaf,
    /// Forward-only record; backward data dropped.
    Detached(&'static str),
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNT {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        s: S,
    },
    DivScalar {
        a: Var,
        s: Var,
    },
    Reshape {
        a: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<S>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    MaskedMeanPool {
        states: Var,
        weights: Vec<S>,
        seq_len: usize,
    },
    L2Normalize {
        a: Var,
        norms: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<S>,
        probs: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<S>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

impl<S> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached(n) => n,
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::DivScalar { .. } => "div_scalar",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gather { .. } => "embedding",
            Op::Gelu { .. } => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detached(_) => vec![],
            Op::MatMul { a, b } | Op::MatMulNT { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::DivScalar { a, s } => vec![*a, *s],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::MaskedMeanPool { states, .. } => vec![*states],
            Op::CrossEntropy { logits, .. } | Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::Gelu { a }
            | Op::Dropout { a, .. }
            | Op::Softmax { a }
            | Op::L2Normalize { a, .. }
            | Op::Sum { a }
            | Op::Mean { a } => vec![*a],
        }
    }

    /// Drops saved backward data. Attention keeps its probabilities so they
    /// can be inspected on inference graphs.
    pub(crate) fn strip(self) -> Self {
        match self {
            op @ (Op::Attention { .. } | Op::Leaf) => op,
            other => Op::Detached(other.name()),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn rows_cols<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable log-softmax of one row, written into `out` as
/// probabilities; returns `log_sum_exp`.
fn softmax_lse<S: Scalar>(row: &[S], out: &mut [S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

impl<S: Scalar> Graph<S> {
    fn val(&self, v: Var) -> &Tensor<S> {
        self.value(v)
    }

    fn needs(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    /// `a · b` with `a: [.., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        let (m, k) = rows_cols(at);
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(GearError::shape("matmul", format!("{:?} · {:?}", at.shape(), bt.shape())));
        }
        let n = bt.shape()[1];
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            at.data(),
            MatView::dense(0, m, k),
            bt.data(),
            MatView::dense(0, k, n),
            S::zero(),
            &mut out,
            MatView::dense(0, m, n),
        );
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `a · bᵀ` with `a: [.., k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        let (m, k) = rows_cols(at);
        if bt.shape().len() != 2 || bt.shape()[1] != k {
            return Err(GearError::shape("matmul_nt", format!("{:?} · {:?}ᵀ", at.shape(), bt.shape())));
        }
        let n = bt.shape()[0];
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            at.data(),
            MatView::dense(0, m, k),
            bt.data(),
            MatView::dense(0, n, k).t(),
            S::zero(),
            &mut out,
            MatView::dense(0, m, n),
        );
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMulNT { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        if at.shape().len() != 2 {
            return Err(GearError::shape("transpose", "rank-2 input required"));
        }
        let (r, c) = (at.shape()[0], at.shape()[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = at.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.shape() != bt.shape() {
            return Err(GearError::shape("add", format!("{:?} + {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Adds a `[c]` row vector to every row of `a: [.., c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (at, rt) = (self.val(a), self.val(row));
        let c = at.cols();
        if rt.len() != c {
            return Err(GearError::shape("add_row", format!("{:?} + row {:?}", at.shape(), rt.shape())));
        }
        let mut data = at.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(rt.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a, row }))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.val(a).map(|x| x * s);
        self.push(value, Op::Scale { a, s })
    }

    /// Divides every element of `a` by the single value held in `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let st = self.val(s);
        if st.len() != 1 {
            return Err(GearError::shape("div_scalar", "divisor must hold one value"));
        }
        let d = st.item();
        let value = self.val(a).map(|x| x / d);
        Ok(self.push(value, Op::DivScalar { a, s }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Stacks `[r_i, c]` blocks into `[Σ r_i, c]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GearError::shape("concat_rows", "no inputs"));
        };
        let c = self.val(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.val(p);
            if t.cols() != c {
                return Err(GearError::shape("concat_rows", "column counts differ"));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Rows `start..end` of `a` viewed as `[rows, cols]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let at = self.val(a);
        let (r, c) = rows_cols(at);
        if start >= end || end > r {
            return Err(GearError::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let value = Tensor::new(vec![end - start, c], at.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    /// Embedding lookup: rows of `table: [V, h]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        let (v, h) = rows_cols(tt);
        if ids.is_empty() {
            return Err(GearError::EmptySequence("embedding lookup".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(GearError::shape("embedding", format!("id {id} >= {v}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), h], data)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = S::from_f64_lossy(GELU_C);
        let k = S::from_f64_lossy(GELU_A);
        let half = S::from_f64_lossy(0.5);
        let value = self.val(a).map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu { a })
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.is_train() || p <= 0.0 {
            return a;
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.val(a).len();
        let mask: Vec<S> = (0..n).map(|_| if self.rng.random::<f64>() < p { S::zero() } else { keep }).collect();
        let at = self.val(a);
        let data = at.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(at.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Dropout { a, mask })
    }

    /// Softmax over the trailing axis, with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let at = self.val(a);
        let c = at.cols();
        let mut data = at.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let value = Tensor::new(at.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Softmax { a })
    }

    /// Per-row standardisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.val(x), self.val(gain), self.val(bias));
        let h = xt.cols();
        if gt.len() != h || bt.len() != h {
            return Err(GearError::shape("layer_norm", "gain/bias width differs from input"));
        }
        let eps = S::from_f64_lossy(eps);
        let hn = S::from_usize_lossy(h);
        let rows = xt.rows();
        let mut xhat = vec![S::zero(); xt.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xt.len()];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().copied().sum::<S>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / hn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..h {
                let xh = (row[j] - mean) * inv;
                xhat[r * h + j] = xh;
                out[r * h + j] = gt.data()[j] * xh + bt.data()[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Mean of the rows of each sequence block where `mask` is 1.
    ///
    /// `states` holds `batch * seq_len` rows; `mask` holds `batch * seq_len`
    /// 0/1 entries. The result is `[batch, h]`.
    pub fn masked_mean_pool(&mut self, states: Var, mask: &[S], seq_len: usize) -> Result<Var> {
        let st = self.val(states);
        let (rows, h) = rows_cols(st);
        if seq_len == 0 || rows % seq_len != 0 || mask.len() != rows {
            return Err(GearError::shape(
                "masked_mean_pool",
                format!("{rows} rows, seq_len {seq_len}, mask {}", mask.len()),
            ));
        }
        let batch = rows / seq_len;
        let mut weights = vec![S::zero(); rows];
        let mut out = vec![S::zero(); batch * h];
        for b in 0..batch {
            let m = &mask[b * seq_len..(b + 1) * seq_len];
            let count = m.iter().filter(|&&x| x > S::zero()).count();
            if count == 0 {
                return Err(GearError::EmptySequence(format!(
                    "masked_mean_pool: sequence {b} has no unmasked position"
                )));
            }
            let w = S::one() / S::from_usize_lossy(count);
            for t in 0..seq_len {
                if m[t] > S::zero() {
                    let r = b * seq_len + t;
                    weights[r] = w;
                    for j in 0..h {
                        out[b * h + j] += w * st.data()[r * h + j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, h], out)?;
        Ok(self.push(value, Op::MaskedMeanPool { states, weights, seq_len }))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        let (r, c) = rows_cols(at);
        let mut norms = Vec::with_capacity(r);
        let mut data = at.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if n <= S::zero() {
                return Err(GearError::Contract("cannot normalise a zero vector".into()));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { a, norms }))
    }

    /// Mean cross-entropy of `logits: [n, V]` against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: &Target<S>) -> Result<Var> {
        let lt = self.val(logits);
        let (n, v) = rows_cols(lt);
        let mut probs = vec![S::zero(); n * v];
        match target {
            Target::Hard { classes, ignore } => {
                if classes.len() != n {
                    return Err(GearError::shape("cross_entropy", "one target per row required"));
                }
                let mut rows = Vec::with_capacity(n);
                let mut total = S::zero();
                let mut count = 0usize;
                for (i, &cls) in classes.iter().enumerate() {
                    if Some(cls) == *ignore {
                        rows.push(None);
                        continue;
                    }
                    if cls >= v {
                        return Err(GearError::shape(
                            "cross_entropy",
                            format!("target {cls} outside vocabulary of {v}"),
                        ));
                    }
                    let lse = softmax_lse(lt.row(i), &mut probs[i * v..(i + 1) * v]);
                    total += lse - lt.row(i)[cls];
                    count += 1;
                    rows.push(Some(cls));
                }
                if count == 0 {
                    return Err(GearError::EmptyLoss("cross_entropy"));
                }
                let value = Tensor::scalar(total / S::from_usize_lossy(count));
                Ok(self.push(value, Op::CrossEntropy { logits, rows, probs, count }))
            }
            Target::Soft(t) => {
                if t.shape() != lt.shape() {
                    return Err(GearError::shape(
                        "cross_entropy",
                        format!("soft targets {:?} vs logits {:?}", t.shape(), lt.shape()),
                    ));
                }
                let tol = S::from_f64_lossy(1e-4);
                let mut total = S::zero();
                for i in 0..n {
                    let trow = t.row(i);
                    let s: S = trow.iter().copied().sum();
                    if (s - S::one()).abs() > tol || trow.iter().any(|&x| x < S::zero()) {
                        return Err(GearError::Contract(format!(
                            "soft target row {i} is not a distribution (sum {s})"
                        )));
                    }
                    let lse = softmax_lse(lt.row(i), &mut probs[i * v..(i + 1) * v]);
                    for (&tj, &lj) in trow.iter().zip(lt.row(i)) {
                        if tj > S::zero() {
                            total += tj * (lse - lj);
                        }
                    }
                }
                let value = Tensor::scalar(total / S::from_usize_lossy(n));
                let targets = t.data().to_vec();
                Ok(self.push(value, Op::SoftCrossEntropy { logits, targets, probs }))
            }
        }
    }

    /// Batched multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qt, kt, vt) = (self.val(q), self.val(k), self.val(v));
        let h = qt.cols();
        let AttentionSpec { batch, q_len, k_len, heads, .. } = spec;
        if heads == 0 || h % heads != 0 {
            return Err(GearError::shape("attention", format!("width {h} not divisible by {heads} heads")));
        }
        if qt.rows() != batch * q_len
            || kt.rows() != batch * k_len
            || vt.rows() != batch * k_len
            || kt.cols() != h
            || vt.cols() != h
        {
            return Err(GearError::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?} for batch {batch}, q_len {q_len}, k_len {k_len}",
                    qt.shape(),
                    kt.shape(),
                    vt.shape()
                ),
            ));
        }
        if spec.key_mask.len() != batch * k_len {
            return Err(GearError::shape("attention", "key mask length mismatch"));
        }
        if spec.causal && q_len != k_len {
            return Err(GearError::shape("attention", "causal attention needs q_len == k_len"));
        }
        let dh = h / heads;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut probs = vec![S::zero(); batch * heads * q_len * k_len];
        let mut out = vec![S::zero(); batch * q_len * h];
        for b in 0..batch {
            let mask = &spec.key_mask[b * k_len..(b + 1) * k_len];
            for hd in 0..heads {
                let p_off = ((b * heads + hd) * q_len) * k_len;
                let qv = MatView::strided(b * q_len * h + hd * dh, q_len, dh, h);
                let kv = MatView::strided(b * k_len * h + hd * dh, k_len, dh, h);
                gemm(
                    scale,
                    qt.data(),
                    qv,
                    kt.data(),
                    kv.t(),
                    S::zero(),
                    &mut probs,
                    MatView::dense(p_off, q_len, k_len),
                );
                for i in 0..q_len {
                    let row = &mut probs[p_off + i * k_len..p_off + (i + 1) * k_len];
                    for (j, x) in row.iter_mut().enumerate() {
                        if !mask[j] || (spec.causal && j > i) {
                            *x = S::neg_infinity();
                        }
                    }
                    softmax_row(row);
                }
                let vv = MatView::strided(b * k_len * h + hd * dh, k_len, dh, h);
                gemm(
                    S::one(),
                    &probs,
                    MatView::dense(p_off, q_len, k_len),
                    vt.data(),
                    vv,
                    S::zero(),
                    &mut out,
                    MatView::strided(b * q_len * h + hd * dh, q_len, dh, h),
                );
            }
        }
        let value = Tensor::new(vec![batch * q_len, h], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }))
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` recorded by an
    /// [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionSpec, &[S])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.val(a).sum());
        self.push(value, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let value = Tensor::scalar(t.sum() / S::from_usize_lossy(t.len()));
        self.push(value, Op::Mean { a })
    }

    pub(crate) fn backward_rule(&self, idx: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Detached(_) => vec![],
            Op::MatMul { a, b } => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (m, k) = rows_cols(at);
                let n = bt.shape()[1];
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        S::one(),
                        g.data(),
                        MatView::dense(0, m, n),
                        bt.data(),
                        MatView::dense(0, k, n).t(),
                        S::zero(),
                        &mut da,
                        MatView::dense(0, m, k),
                    );
                    res.push((*a, Tensor::new(at.shape().to_vec(), da).unwrap()));
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(
                        S::one(),
                        at.data(),
                        MatView::dense(0, m, k).t(),
                        g.data(),
                        MatView::dense(0, m, n),
                        S::zero(),
                        &mut db,
                        MatView::dense(0, k, n),
                    );
                    res.push((*b, Tensor::new(bt.shape().to_vec(), db).unwrap()));
                }
                res
            }
            Op::MatMulNT { a, b } => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (m, k) = rows_cols(at);
                let n = bt.shape()[0];
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        S::one(),
                        g.data(),
                        MatView::dense(0, m, n),
                        bt.data(),
                        MatView::dense(0, n, k),
                        S::zero(),
                        &mut da,
                        MatView::dense(0, m, k),
                    );
                    res.push((*a, Tensor::new(at.shape().to_vec(), da).unwrap()));
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); n * k];
                    gemm(
                        S::one(),
                        g.data(),
                        MatView::dense(0, m, n).t(),
                        at.data(),
                        MatView::dense(0, m, k),
                        S::zero(),
                        &mut db,
                        MatView::dense(0, n, k),
                    );
                    res.push((*b, Tensor::new(bt.shape().to_vec(), db).unwrap()));
                }
                res
            }
            Op::Transpose { a } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g.data()[i * c + j];
                    }
                }
                vec![(*a, Tensor::new(vec![c, r], da).unwrap())]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow { a, row } => {
                let c = g.cols();
                let mut dr = vec![S::zero(); c];
                for chunk in g.data().chunks(c) {
                    for (d, &x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                let rshape = self.val(*row).shape().to_vec();
                vec![(*a, g.clone()), (*row, Tensor::new(rshape, dr).unwrap())]
            }
            Op::Scale { a, s } => vec![(*a, g.map(|x| x * *s))],
            Op::DivScalar { a, s } => {
                let d = self.val(*s).item();
                let at = self.val(*a);
                let ds = -g.dot(at) / (d * d);
                vec![(*a, g.map(|x| x / d)), (*s, Tensor::new(self.val(*s).shape().to_vec(), vec![ds]).unwrap())]
            }
            Op::Reshape { a } => {
                let shape = self.val(*a).shape().to_vec();
                vec![(*a, g.clone().reshaped(&shape).unwrap())]
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = self.val(p);
                    let n = t.len();
                    res.push((p, Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec()).unwrap()));
                    off += n;
                }
                res
            }
            Op::SliceRows { a, start } => {
                let at = self.val(*a);
                let c = at.cols();
                let mut da = Tensor::zeros(at.shape());
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, da)]
            }
            Op::Gather { table, ids } => {
                let tt = self.val(*table);
                let h = tt.cols();
                let mut dt = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * h..(id + 1) * h];
                    for (d, &x) in dst.iter_mut().zip(&g.data()[r * h..(r + 1) * h]) {
                        *d += x;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Gelu { a } => {
                let c = S::from_f64_lossy(GELU_C);
                let k = S::from_f64_lossy(GELU_A);
                let half = S::from_f64_lossy(0.5);
                let three = S::from_f64_lossy(3.0);
                let at = self.val(*a);
                let data = at
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d =
                            half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        gy * d
                    })
                    .collect();
                vec![(*a, Tensor::new(at.shape().to_vec(), data).unwrap())]
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), data).unwrap())]
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut da = vec![S::zero(); out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let s: S = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] = y[j] * (gy[j] - s);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), da).unwrap())]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gt = self.val(*gain);
                let h = out.cols();
                let hn = S::from_usize_lossy(h);
                let rows = out.rows();
                let mut dx = vec![S::zero(); out.len()];
                let mut dg = vec![S::zero(); h];
                let mut db = vec![S::zero(); h];
                for r in 0..rows {
                    let gy = g.row(r);
                    let xh = &xhat[r * h..(r + 1) * h];
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in 0..h {
                        let d = gy[j] * gt.data()[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                        dg[j] += gy[j] * xh[j];
                        db[j] += gy[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..h {
                        let d = gy[j] * gt.data()[j];
                        dx[r * h + j] = inv / hn * (hn * d - sum_d - xh[j] * sum_dx);
                    }
                }
                vec![
                    (*x, Tensor::new(out.shape().to_vec(), dx).unwrap()),
                    (*gain, Tensor::new(gt.shape().to_vec(), dg).unwrap()),
                    (*bias, Tensor::new(self.val(*bias).shape().to_vec(), db).unwrap()),
                ]
            }
            Op::MaskedMeanPool { states, weights, seq_len } => {
                let st = self.val(*states);
                let h = st.cols();
                let mut ds = vec![S::zero(); st.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    let b = r / seq_len;
                    for j in 0..h {
                        ds[r * h + j] = w * g.data()[b * h + j];
                    }
                }
                vec![(*states, Tensor::new(st.shape().to_vec(), ds).unwrap())]
            }
            Op::L2Normalize { a, norms } => {
                let c = out.cols();
                let mut da = vec![S::zero(); out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let proj: S = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] = (gy[j] - y[j] * proj) / n;
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), da).unwrap())]
            }
            Op::CrossEntropy { logits, rows, probs, count } => {
                let lt = self.val(*logits);
                let v = lt.cols();
                let scale = g.item() / S::from_usize_lossy(*count);
                let mut dl = vec![S::zero(); lt.len()];
                for (i, cls) in rows.iter().enumerate() {
                    let Some(cls) = cls else { continue };
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * scale;
                    }
                    dl[i * v + cls] -= scale;
                }
                vec![(*logits, Tensor::new(lt.shape().to_vec(), dl).unwrap())]
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let lt = self.val(*logits);
                let (n, v) = rows_cols(lt);
                let scale = g.item() / S::from_usize_lossy(n);
                let mut dl = vec![S::zero(); lt.len()];
                for i in 0..n {
                    let t = &targets[i * v..(i + 1) * v];
                    let mass: S = t.iter().copied().sum();
                    for j in 0..v {
                        dl[i * v + j] = (probs[i * v + j] * mass - t[j]) * scale;
                    }
                }
                vec![(*logits, Tensor::new(lt.shape().to_vec(), dl).unwrap())]
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, g),
            Op::Sum { a } => {
                let at = self.val(*a);
                vec![(*a, Tensor::full(at.shape(), g.item()))]
            }
            Op::Mean { a } => {
                let at = self.val(*a);
                let s = g.item() / S::from_usize_lossy(at.len());
                vec![(*a, Tensor::full(at.shape(), s))]
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[S],
        g: &Tensor<S>,
    ) -> Vec<(Var, Tensor<S>)> {
        let (qt, kt, vt) = (self.val(q), self.val(k), self.val(v));
        let h = qt.cols();
        let AttentionSpec { batch, q_len, k_len, heads, .. } = *spec;
        let dh = h / heads;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut dq = vec![S::zero(); qt.len()];
        let mut dk = vec![S::zero(); kt.len()];
        let mut dv = vec![S::zero(); vt.len()];
        let mut dp = vec![S::zero(); q_len * k_len];
        for b in 0..batch {
            for hd in 0..heads {
                let p_off = ((b * heads + hd) * q_len) * k_len;
                let pv = MatView::dense(p_off, q_len, k_len);
                let qv = MatView::strided(b * q_len * h + hd * dh, q_len, dh, h);
                let kv = MatView::strided(b * k_len * h + hd * dh, k_len, dh, h);
                let gv = MatView::strided(b * q_len * h + hd * dh, q_len, dh, h);
                // dV += Pᵀ · dO
                gemm(S::one(), probs, pv.t(), g.data(), gv, S::one(), &mut dv, kv);
                // dP = dO · Vᵀ
                gemm(S::one(), g.data(), gv, vt.data(), kv.t(), S::zero(), &mut dp, MatView::dense(0, q_len, k_len));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the logit scale.
                for i in 0..q_len {
                    let prow = &probs[p_off + i * k_len..p_off + (i + 1) * k_len];
                    let drow = &mut dp[i * k_len..(i + 1) * k_len];
                    let s: S = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - s) * scale;
                    }
                }
                let dsv = MatView::dense(0, q_len, k_len);
                gemm(S::one(), &dp, dsv, kt.data(), kv, S::one(), &mut dq, qv);
                gemm(S::one(), &dp, dsv.t(), qt.data(), qv, S::one(), &mut dk, kv);
            }
        }
        vec![
            (q, Tensor::new(qt.shape().to_vec(), dq).unwrap()),
            (k, Tensor::new(kt.shape().to_vec(), dk).unwrap()),
            (v, Tensor::new(vt.shape().to_vec(), dv).unwrap()),
        ]
    }
}
