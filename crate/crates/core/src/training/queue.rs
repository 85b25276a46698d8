use crate::error::{GearError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// FIFO ring of momentum query and document embeddings.
#[derive(Debug, Clone)]
pub struct NegativeQueue<S> {
    capacity: usize,
    dim: usize,
    queries: Vec<S>,
    docs: Vec<S>,
    keys: Vec<Option<String>>,
    head: usize,
    len: usize,
}

impl<S: Scalar> NegativeQueue<S> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            queries: vec![S::zero(); capacity * dim],
            docs: vec![S::zero(); capacity * dim],
            keys: vec![None; capacity],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends rows of momentum embeddings `[B, h]`, evicting the oldest.
    /// Rows must be unit length.
    pub fn push(&mut self, mq: &Tensor<S>, md: &Tensor<S>, keys: &[String]) -> Result<()> {
        if mq.shape() != md.shape() || mq.cols() != self.dim || mq.rows() != keys.len() {
            return Err(GearError::shape(
                "queue push",
                format!("{:?} / {:?} with {} keys into width {}", mq.shape(), md.shape(), keys.len(), self.dim),
            ));
        }
        super::loss::check_unit_rows(mq, "queued query embedding")?;
        super::loss::check_unit_rows(md, "queued document embedding")?;
        if self.capacity == 0 {
            return Ok(());
        }
        for (r, key) in keys.iter().enumerate() {
            let at = self.head * self.dim;
            self.queries[at..at + self.dim].copy_from_slice(mq.row(r));
            self.docs[at..at + self.dim].copy_from_slice(md.row(r));
            self.keys[self.head] = Some(key.clone());
            self.head = (self.head + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        // oldest first
        let start = if self.len < self.capacity { 0 } else { self.head };
        (0..self.len).map(move |i| (start + i) % self.capacity.max(1))
    }

    fn gather(&self, src: &[S]) -> Option<Tensor<S>> {
        if self.len == 0 {
            return None;
        }
        let mut data = Vec::with_capacity(self.len * self.dim);
        for s in self.slots() {
            data.extend_from_slice(&src[s * self.dim..(s + 1) * self.dim]);
        }
        Some(Tensor::new(vec![self.len, self.dim], data).expect("queue rows"))
    }

    /// Valid query-side entries `[len, h]`, oldest first.
    pub fn query_rows(&self) -> Option<Tensor<S>> {
        self.gather(&self.queries)
    }

    /// Valid document-side entries `[len, h]`, oldest first.
    pub fn doc_rows(&self) -> Option<Tensor<S>> {
        self.gather(&self.docs)
    }

    /// Document keys of the valid entries, oldest first.
    pub fn keys(&self) -> Vec<&str> {
        self.slots().map(|s| self.keys[s].as_deref().expect("valid slot has a key")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, tag: f64) -> Tensor<f64> {
        let mut rows = Vec::new();
        for i in 0..n {
            let a = tag + i as f64;
            rows.push(vec![a.cos(), a.sin()]);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn fifo_occupancy_and_order() {
        let mut q = NegativeQueue::<f64>::new(5, 2);
        for s in 0..4 {
            let keys: Vec<String> = (0..2).map(|i| format!("s{s}i{i}")).collect();
            q.push(&unit_rows(2, s as f64), &unit_rows(2, s as f64 + 0.5), &keys).unwrap();
            assert_eq!(q.len(), (2 * (s + 1)).min(5));
        }
        assert_eq!(q.keys(), ["s1i1", "s2i0", "s2i1", "s3i0", "s3i1"]);
        let d = q.doc_rows().unwrap();
        assert_eq!(d.rows(), 5);
        assert!((d.row(0)[0] - (2.5f64).cos()).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let mut q = NegativeQueue::<f64>::new(4, 2);
        let bad = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(q.push(&bad, &bad, &["k".into()]).is_err());
        assert!(q.is_empty());
    }
}
