use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::GearError;
use crate::model::network::SeqBatch;
use crate::model::{Fused, GearModel, ModelConfig, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::testutil::{tiny_model, triples};
use crate::text::{tokenize, Role, Vocabulary};

fn unit(rows: &[Vec<f64>]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn cl_value(
    q: &Tensor<f64>,
    d: &Tensor<f64>,
    queue: &NegativeQueue<f64>,
    tau: f64,
    w: f64,
    keys: Option<&[String]>,
) -> crate::Result<f64> {
    let mut g = Graph::inference();
    let (qv, dv) = (g.constant(q.clone()), g.constant(d.clone()));
    let t = g.constant(Tensor::scalar(tau));
    let l = contrastive_loss(
        &mut g,
        ContrastiveInputs { q: qv, d: dv, mq: q, md: d, queue, tau: t, soft_weight: w, doc_keys: keys },
    )?;
    Ok(g.value(l).item())
}

#[test]
fn single_pair_has_zero_loss() {
    let q = unit(&[vec![1.0, 2.0]]);
    let d = unit(&[vec![-1.0, 0.5]]);
    let l = cl_value(&q, &d, &NegativeQueue::new(4, 2), 0.07, 0.0, None).unwrap();
    assert!(l.abs() < 1e-12);
}

#[test]
fn orthogonal_pairs_match_two_way_softmax() {
    let q = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let l = cl_value(&q, &q, &NegativeQueue::new(4, 2), 1.0, 0.0, None).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    assert!((expected - 0.31326).abs() < 1e-5);
}

#[test]
fn zero_soft_weight_is_hard_cross_entropy() {
    let q = unit(&[vec![1.0, 0.2, 0.1], vec![0.3, 1.0, 0.0], vec![0.0, 0.4, 1.0]]);
    let d = unit(&[vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.1], vec![0.1, 0.1, 1.0]]);
    let queue = NegativeQueue::new(4, 3);
    let hard = cl_value(&q, &d, &queue, 0.5, 0.0, None).unwrap();
    // oracle: mean of row-wise -log softmax of the diagonal, both directions
    let oracle = |a: &Tensor<f64>, b: &Tensor<f64>| {
        (0..3)
            .map(|i| {
                let s: Vec<f64> = (0..3).map(|j| crate::tensor::dot(a.row(i), b.row(j)) / 0.5).collect();
                let z = s.iter().map(|x| x.exp()).sum::<f64>().ln();
                z - s[i]
            })
            .sum::<f64>()
            / 3.0
    };
    let expected = 0.5 * (oracle(&q, &d) + oracle(&d, &q));
    assert!((hard - expected).abs() < 1e-12);
    // a small soft weight moves the loss continuously
    let soft = cl_value(&q, &d, &queue, 0.5, 1e-9, None).unwrap();
    assert!((soft - hard).abs() < 1e-7);
}

#[test]
fn unnormalized_inputs_are_rejected() {
    let q = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    let err = cl_value(&q, &q, &NegativeQueue::new(4, 2), 0.1, 0.0, None).unwrap_err();
    assert!(matches!(err, GearError::Contract(_)));
}

#[test]
fn duplicate_keys_drop_out_of_the_negatives() {
    let q = unit(&[vec![1.0, 0.1, 0.0], vec![0.2, 1.0, 0.0]]);
    let d = unit(&[vec![0.9, 0.2, 0.1], vec![0.1, 1.0, 0.2]]);
    let mut queue = NegativeQueue::new(4, 3);
    let extra_q = unit(&[vec![0.5, 0.5, 0.5]]);
    let extra_d = unit(&[vec![1.0, 0.0, 0.3]]);
    queue.push(&extra_q, &extra_d, &["a".into()]).unwrap();
    let keys: Vec<String> = vec!["a".into(), "b".into()];
    let masked = cl_value(&q, &d, &queue, 0.2, 0.0, Some(&keys)).unwrap();
    // oracle: anchor 0 sees no queue negative, anchor 1 sees it
    let dot = |a: &[f64], b: &[f64]| crate::tensor::dot(a, b) / 0.2;
    let ce = |pos: f64, negs: &[f64]| {
        let z = negs.iter().chain([pos].iter()).map(|x| x.exp()).sum::<f64>().ln();
        z - pos
    };
    let q2d = (ce(dot(q.row(0), d.row(0)), &[dot(q.row(0), d.row(1))])
        + ce(dot(q.row(1), d.row(1)), &[dot(q.row(1), d.row(0)), dot(q.row(1), extra_d.row(0))]))
        / 2.0;
    let d2q = (ce(dot(d.row(0), q.row(0)), &[dot(d.row(0), q.row(1))])
        + ce(dot(d.row(1), q.row(1)), &[dot(d.row(1), q.row(0)), dot(d.row(1), extra_q.row(0))]))
        / 2.0;
    assert!((masked - 0.5 * (q2d + d2q)).abs() < 1e-9);
}

fn rotation(angles: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for (k, &a) in angles.iter().enumerate() {
        let (i, j) = (k % dim, (k + 1) % dim);
        let (c, s) = (a.cos(), a.sin());
        for row in r.iter_mut() {
            let (x, y) = (row[i], row[j]);
            row[i] = c * x - s * y;
            row[j] = s * x + c * y;
        }
    }
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn rotation_leaves_loss_unchanged(
        raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 6),
        angles in proptest::collection::vec(-3.0f64..3.0, 5),
        tau in 0.05f64..1.0,
    ) {
        prop_assume!(raw.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let q = unit(&raw[..3]);
        let d = unit(&raw[3..]);
        let rot = rotation(&angles, 4);
        let apply = |t: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|i| (0..4).map(|c| (0..4).map(|k| t.row(i)[k] * rot[k][c]).sum()).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let queue = NegativeQueue::new(4, 4);
        let a = cl_value(&q, &d, &queue, tau, 0.0, None).unwrap();
        let b = cl_value(&apply(&q), &apply(&d), &queue, tau, 0.0, None).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(1.0, 2.0, 0.25), 1.5);
    assert_eq!(total_loss(0.7, 5.0, 0.0), 0.7);
    assert_eq!(total_loss(0.7, 5.0, 1.0), 5.7);
}

#[test]
fn momentum_update_examples() {
    let mut p = ParamStore::<f64>::new();
    p.insert("embed.tokens", Tensor::full(&[2, 2], 0.0));
    let mut m = ParamStore::<f64>::new();
    m.insert("embed.tokens", Tensor::full(&[2, 2], 1.0));
    momentum_update(&p, &mut m, 0.995);
    assert_eq!(m.expect("embed.tokens").data()[0], 0.995);
    for _ in 0..99 {
        momentum_update(&p, &mut m, 0.995);
    }
    let gap = m.expect("embed.tokens").data()[0];
    assert!((gap - 0.995f64.powi(100)).abs() < 1e-12);
    let fixed = p.clone();
    let mut same = p.clone();
    momentum_update(&fixed, &mut same, 0.995);
    assert_eq!(same, fixed);
}

#[test]
fn schedule_anchor_points() {
    let cfg = TrainConfig::default();
    let total = 5000;
    assert_eq!(lr_at(0, &cfg, total), 1e-6);
    assert_eq!(lr_at(1000, &cfg, total), 1e-5);
    assert_eq!(lr_at(total, &cfg, total), 1e-6);
    let mid = lr_at(500, &cfg, total);
    assert!((mid - 5.5e-6).abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for s in (1000..=total).step_by(100) {
        let lr = lr_at(s, &cfg, total);
        assert!(lr <= prev);
        prev = lr;
    }
    assert_eq!(soft_label_weight(0, 50, 0.4, 2.0), 0.0);
    assert_eq!(soft_label_weight(100, 50, 0.4, 2.0), 0.4);
    assert_eq!(soft_label_weight(50, 50, 0.4, 2.0), 0.2);
    assert_eq!(soft_label_weight(1000, 50, 0.4, 2.0), 0.4);
}

#[test]
fn adamw_zero_gradient_and_decay() {
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::full(&[2, 2], 3.0));
    p.insert("b", Tensor::full(&[2], 3.0));
    let grads = vec![("w".to_string(), Tensor::zeros(&[2, 2])), ("b".to_string(), Tensor::zeros(&[2]))];
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut opt = AdamW::new();
    opt.step(&mut p, &grads, 1e-3, &cfg);
    assert_eq!(p.expect("w").data()[0], 3.0);
    let cfg = TrainConfig { weight_decay: 0.05, ..TrainConfig::default() };
    let before = p.expect("w").data()[0];
    opt.step(&mut p, &grads, 1e-3, &cfg);
    let after = p.expect("w").data()[0];
    assert!(((before - after) - 1e-3 * 0.05 * before).abs() < 1e-15);
    // rank-1 arrays are exempt
    assert_eq!(p.expect("b").data()[0], 3.0);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![("a".to_string(), Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap())];
    let n = clip_global_norm(&mut g, 1.0);
    assert_eq!(n, 5.0);
    let after: f64 = g[0].1.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-6);
}

fn fused_of(m: &GearModel<f64>, q: &str, d: &str) -> Fused<f64> {
    let tq = tokenize(q, &m.vocab, 32, Role::Encoder);
    let td = tokenize(d, &m.vocab, 32, Role::Encoder);
    m.fuse(&tq, &m.encode_document(&td).unwrap()).unwrap()
}

fn lm_value(m: &GearModel<f64>, fused: &Fused<f64>, target: &str) -> crate::Result<f64> {
    let t = tokenize(target, &m.vocab, 32, Role::DecoderTarget);
    let queries = SeqBatch {
        ids: vec![0; fused.query_mask.len()],
        mask: fused.query_mask.clone(),
        batch: 1,
        len: fused.query_mask.len(),
    };
    let mut g = Graph::inference();
    let f = g.constant(fused.states.clone());
    let l = lm_loss(&mut g, &m.params, &m.config, f, &queries, &[&t])?;
    Ok(g.value(l).item())
}

#[test]
fn one_word_target_averages_two_positions() {
    let m = tiny_model(3);
    let f = fused_of(&m, "where cat", "the cat sat on the mat");
    let loss = lm_value(&m, &f, "mat").unwrap();
    let mat = m.vocab.id("mat").unwrap();
    let logits = m.decode_logits(&f, &[crate::text::DEC, mat]).unwrap();
    let v = m.vocab.len();
    let nll = |row: &[f64], k: usize| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
        z - row[k]
    };
    let expected = 0.5 * (nll(&logits.data()[..v], mat) + nll(&logits.data()[v..], crate::text::EOS));
    assert!((loss - expected).abs() < 1e-12);
    assert!(matches!(lm_value(&m, &f, ""), Err(GearError::EmptySequence(_))));
}

#[test]
fn untrained_decoder_is_near_uniform() {
    let words: Vec<String> = (0..8192 - crate::text::NUM_SPECIALS).map(|i| format!("w{i}")).collect();
    let v = Vocabulary::from_words(words).unwrap();
    let cfg = ModelConfig { vocab_size: v.len(), ..ModelConfig::default() };
    let m = GearModel::<f64>::new(cfg, v, 5).unwrap();
    let f = fused_of(&m, "w1 w2 w3", "w10 w11 w12 w13 w14");
    let loss = lm_value(&m, &f, "w7 w8 w9 w100").unwrap();
    assert!((loss - 8192f64.ln()).abs() < 0.5, "loss {loss}");
}

fn trainer(alpha: f64, steps_data: usize) -> Trainer<f64> {
    let cfg = TrainConfig {
        alpha,
        batch_size: 4,
        queue_size: 10,
        peak_lr: 3e-3,
        warmup_steps: 2,
        warmup_lr: 1e-4,
        min_lr: 1e-4,
        epochs: 200,
        max_doc_len: 32,
        ..TrainConfig::default()
    };
    Trainer::new(tiny_model(1), cfg, steps_data).unwrap()
}

#[test]
fn queue_occupancy_follows_fifo_count() {
    let data = triples();
    let mut t = trainer(0.25, data.len());
    for s in 1..=4 {
        t.train_step(&data).unwrap();
        assert_eq!(t.queue.len(), (s * 4).min(10));
    }
}

#[test]
fn alpha_zero_leaves_decoder_untouched() {
    let data = triples();
    let mut t = trainer(0.0, data.len());
    let before = t.model.params.clone();
    let r = t.train_step(&data).unwrap();
    assert_eq!(r.l_lm, 0.0);
    assert_eq!(r.l_total, r.l_cl);
    for (name, arr) in before.iter() {
        let after = t.model.params.expect(name);
        if name.starts_with("decoder.") || name.starts_with("fusion.") {
            assert_eq!(arr, after, "{name} changed");
        }
    }
    assert_ne!(before.expect("query.layer0.attn.wq"), t.model.params.expect("query.layer0.attn.wq"));
}

#[test]
fn repeated_batch_loss_decreases_and_reports_are_consistent() {
    let data = triples();
    let mut t = trainer(0.25, data.len());
    let first = t.train_step(&data).unwrap();
    let mut last = first.clone();
    for _ in 1..100 {
        last = t.train_step(&data).unwrap();
        assert!((last.l_total - (last.l_cl + 0.25 * last.l_lm)).abs() < 1e-6);
    }
    assert!(last.l_total < first.l_total, "{} -> {}", first.l_total, last.l_total);
}

#[test]
fn momentum_lags_the_online_encoders() {
    let data = triples();
    let mut t = trainer(0.25, data.len());
    let tok = tokenize("the cat sat", &t.model.vocab, 32, Role::Encoder);
    let old_online = t.model.encode_query(&tok).unwrap();
    t.train_step(&data).unwrap();
    let new_online = t.model.encode_query(&tok).unwrap();
    let mom = t.model.momentum_encode(crate::model::Side::Query, &tok).unwrap();
    assert_ne!(mom, old_online);
    assert_ne!(mom, new_online);
    let doc = t.model.encode_document(&tok).unwrap().pooled;
    assert_ne!(doc, new_online);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let data = triples();
    let mut t = trainer(0.25, data.len());
    t.train_step(&data).unwrap();
    assert!(!t.queue.is_empty());
    let grads = t.gradients(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let candidates: Vec<(String, usize, f64)> = grads
        .iter()
        .filter(|(n, _)| n != "tau")
        .flat_map(|(n, g)| g.data().iter().enumerate().map(move |(i, &v)| (n.clone(), i, v)))
        .filter(|(_, _, v)| v.abs() > 1e-6)
        .collect();
    let h = 1e-5;
    for _ in 0..10 {
        let (name, i, analytic) = candidates[rng.random_range(0..candidates.len())].clone();
        let orig = t.model.params.expect(&name).data()[i];
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
        let up = t.loss(&data).unwrap();
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
        let down = t.loss(&data).unwrap();
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = crate::tensor::gradcheck::rel_err(analytic, numeric);
        assert!(rel < 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric} rel {rel}");
    }
}
