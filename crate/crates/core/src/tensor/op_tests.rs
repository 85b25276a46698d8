use approx_eq::assert_close;

use super::gradcheck::{check, check_all_ops};
use super::{AttentionSpec, Graph, Target, Tensor};
use crate::error::GearError;

mod approx_eq {
    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a as f64, $b as f64);
            assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
        }};
    }
    pub(crate) use assert_close;
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let bad = g.matmul(a, a);
    assert!(matches!(bad, Err(GearError::Shape { .. })));
}

#[test]
fn matmul_gradient_of_sum() {
    // Frozen from central differences (h = 1e-3, f64): d sum(AB)/dA = 1·Bᵀ.
    let mut g = Graph::<f64>::new();
    let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let b = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(a).unwrap();
    for (&x, want) in grad.data().iter().zip([2.0, 2.0, 2.0, 2.0]) {
        assert_close!(x, want, 1e-12);
    }
    // The frozen values agree with a direct numeric probe.
    let report = check(&[t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])], 1e-3, 1, |g, v| {
        let b = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        g.matmul(v[0], b)
    })
    .unwrap();
    assert!(report.passes(1e-6));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let y = g.softmax(x);
    // exp-normalise by hand: e / (e + e²), e² / (e + e²)
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    assert_close!(g.value(y).data()[0], e1 / (e1 + e2), 1e-12);
    assert_close!(g.value(y).data()[0], 0.26894, 1e-5);
    assert_close!(g.value(y).data()[1], 0.73106, 1e-5);

    let x = g.constant(t(&[2], &[1000.0, 1000.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let gain = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let bias = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let x = g.constant(t(&[2], &[-1.0, 1.0]));
    let gain = g.constant(t(&[2], &[1.0, 1.0]));
    let bias = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.layer_norm(x, gain, bias, 1e-300).unwrap();
    assert_close!(g.value(y).data()[0], -1.0, 1e-12);
    assert_close!(g.value(y).data()[1], 1.0, 1e-12);
}

#[test]
fn masked_mean_pool_examples() {
    let mut g = Graph::<f64>::new();
    let s = g.leaf(t(&[2, 2], &[2.0, 4.0, 6.0, 8.0]), true);
    let p = g.masked_mean_pool(s, &[1.0, 1.0], 2).unwrap();
    assert_eq!(g.value(p).data(), &[4.0, 6.0]);
    let p = g.masked_mean_pool(s, &[1.0, 0.0], 2).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 4.0]);

    let total = g.sum(p);
    g.backward(total).unwrap();
    assert_eq!(g.grad(s).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);

    let err = g.masked_mean_pool(s, &[0.0, 0.0], 2);
    assert!(matches!(err, Err(GearError::EmptySequence(_))));
}

#[test]
fn masked_mean_pool_gradient_spreads_evenly() {
    // Three unmasked rows out of four: each receives 1/3 of the upstream gradient.
    let mut g = Graph::<f64>::new();
    let s = g.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]), true);
    let p = g.masked_mean_pool(s, &[1.0, 0.0, 1.0, 1.0], 4).unwrap();
    let total = g.sum(p);
    g.backward(total).unwrap();
    let grad = g.grad(s).unwrap().data().to_vec();
    assert_close!(grad[0], 1.0 / 3.0, 1e-15);
    assert_eq!(grad[1], 0.0);
    let report =
        check(&[t(&[4, 1], &[1.0, 2.0, 3.0, 4.0])], 1e-3, 3, |g, v| g.masked_mean_pool(v[0], &[1.0, 0.0, 1.0, 1.0], 4))
            .unwrap();
    assert!(report.passes(1e-6));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(t(&[1, 4], &[0.0; 4]));
    let l = g.cross_entropy(logits, &Target::Hard { classes: vec![2], ignore: None }).unwrap();
    assert_close!(g.value(l).item(), 4f64.ln(), 1e-12);
    assert_close!(g.value(l).item(), 1.38629, 1e-5);

    // Soft target equal to softmax(logits): the loss is that distribution's entropy.
    let raw = [0.3, -1.2, 2.0, 0.5];
    let logits = g.constant(t(&[1, 4], &raw));
    let p = g.softmax(logits);
    let probs = g.value(p).clone();
    let l = g.cross_entropy(logits, &Target::Soft(probs.clone())).unwrap();
    let entropy: f64 = -probs.data().iter().map(|&q| q * q.ln()).sum::<f64>();
    assert_close!(g.value(l).item(), entropy, 1e-12);

    // One-hot soft target reproduces the hard loss.
    let hard = g.cross_entropy(logits, &Target::Hard { classes: vec![1], ignore: None }).unwrap();
    let soft = g.cross_entropy(logits, &Target::Soft(t(&[1, 4], &[0.0, 1.0, 0.0, 0.0]))).unwrap();
    assert_eq!(g.value(hard).item(), g.value(soft).item());

    let all_ignored = g.cross_entropy(logits, &Target::Hard { classes: vec![0], ignore: Some(0) });
    assert!(matches!(all_ignored, Err(GearError::EmptyLoss(_))));
}

#[test]
fn attention_padded_keys_get_zero_weight() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(t(&[2, 2], &[0.3, -0.2, 1.0, 0.5]));
    let k = g.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.0, 9.0, 9.0]));
    let spec =
        AttentionSpec { batch: 1, q_len: 2, k_len: 3, heads: 1, key_mask: vec![true, true, false], causal: false };
    let out = g.attention(q, k, k, spec).unwrap();
    let (_, probs) = g.attention_probs(out).unwrap();
    assert_eq!(probs[2], 0.0);
    assert_eq!(probs[5], 0.0);
    assert_close!(probs[0] + probs[1], 1.0, 1e-12);
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, report) in check_all_ops(5, 11).unwrap() {
        assert!(report.passes(1e-4), "{name}: {report:?}");
    }
}

#[test]
fn composed_graph_matches_finite_differences() {
    // layer_norm -> matmul -> softmax, checked as one composition.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let report = check(&[x, w], 1e-3, 9, |g, v| {
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let n = g.layer_norm(v[0], gain, bias, 1e-12)?;
        let y = g.matmul(n, v[1])?;
        Ok(g.softmax(y))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(77);
        let x = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng);
        let mut g = Graph::with_options(true, true, 3);
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.dropout(h, 0.2);
        let h = g.gelu(h);
        let s = g.softmax(h);
        let l = g.mean(s);
        let l = g.scale(l, 3.0);
        g.backward(l).unwrap();
        (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(
        a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(b1, b2);
}

#[test]
fn nonfinite_forward_is_reported() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 0.0]), true);
    let zero = g.leaf(t(&[1], &[0.0]), true);
    let y = g.div_scalar(x, zero).unwrap();
    let l = g.sum(y);
    match g.backward(l) {
        Err(GearError::NonFinite { op, .. }) => assert_eq!(op, "div_scalar"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut g = Graph::<f64>::inference();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = g.softmax(x);
    assert!(!g.requires_grad(y));
    let s = g.sum(y);
    assert!(g.backward(s).is_err());
}

mod props {
    use proptest::prelude::*;

    use super::super::{Graph, Tensor};

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = v.len();
            let mut g = Graph::<f64>::inference();
            let x = g.constant(Tensor::new(vec![n], v).unwrap());
            let y = g.softmax(x);
            let s: f64 = g.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
