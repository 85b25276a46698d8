//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p gear-core --test acceptance -- 4 9` runs a subset.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use gear_core::datasynth::{
    dedupe_keywords, is_candidate, preprocess_document, synthesize, FilterConfig, LexicalRelevance, RejectReason,
    RelevanceModel, Rewriter, RuleRewriter,
};
use gear_core::eval::{
    evaluate_generation, evaluate_global, exact_match, f1, local_recall_by_layer, map_at_k, recall_at_k, rouge_1,
    rouge_l,
};
use gear_core::generation::DecodeConfig;
use gear_core::model::checkpoint::{from_bytes, to_bytes};
use gear_core::model::{ModelConfig, ParamStore};
use gear_core::records::{CorpusRecord, Triple};
use gear_core::retrieval::{build_index, EmbeddingIndex, LocateConfig};
use gear_core::synthetic::{documents, qar_triples, rir_triples, texts};
use gear_core::tensor::gradcheck::{check_all_ops, rel_err};
use gear_core::text::{tokenize, Document, Role, Vocabulary};
use gear_core::training::{lr_at, momentum_update, soft_label_weight, TrainConfig};
use gear_core::{GearError, Model32, Model64, Tensor, Trainer32, Trainer64};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let t = started.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    const OP_TOL: f64 = 1e-4;
    const E2E_TOL: f64 = 1e-3;
    const H: f64 = 1e-3;
    let started = Instant::now();
    let ops = check_all_ops(5, 2024).expect("op checks run");
    let (worst_op, worst) =
        ops.iter().map(|(n, r)| (*n, r.max_rel_err)).fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ops_ok = ops.iter().all(|(_, r)| r.passes(OP_TOL));

    let data = qar_triples(4, 7);
    let vocab = Vocabulary::build(texts(&data), 512, 1).unwrap();
    let cfg = ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        vocab_size: vocab.len(),
        max_positions: 40,
        decoder_layers: 1,
        local_layer: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 4,
        queue_size: 8,
        peak_lr: 1e-3,
        warmup_steps: 1,
        epochs: 4,
        max_doc_len: 40,
        max_target_len: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer64::new(Model64::new(cfg, vocab, 3).unwrap(), tc, data.len()).unwrap();
    t.train_step(&data).unwrap();
    t.train_step(&data).unwrap();
    let grads = t.gradients(&data).unwrap();
    let cands: Vec<(String, usize, f64)> = grads
        .iter()
        .flat_map(|(n, g)| g.data().iter().enumerate().map(move |(i, &v)| (n.clone(), i, v)))
        .filter(|c| c.2.abs() > 1e-6)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut e2e_worst = 0.0f64;
    let mut names = Vec::new();
    for (name, i, analytic) in cands.choose_multiple(&mut rng, 10).cloned() {
        let orig = t.model.params.expect(&name).data()[i];
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig + H;
        let up = t.loss(&data).unwrap();
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig - H;
        let down = t.loss(&data).unwrap();
        t.model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
        e2e_worst = e2e_worst.max(rel_err(analytic, (up - down) / (2.0 * H)));
        names.push(name);
    }
    let (fast, time) = within(Duration::from_secs(120), started);
    outcome(
        ops_ok && e2e_worst < E2E_TOL && names.len() == 10 && fast,
        format!(
            "{} ops worst {worst_op} rel {worst:.1e} (tol {OP_TOL:.0e}); end-to-end loss, 10 params, worst rel {e2e_worst:.1e} (tol {E2E_TOL:.0e}); {time}",
            ops.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn attention_invariants() -> Outcome {
    let started = Instant::now();
    let data = rir_triples(60, 3);
    let vocab = Vocabulary::build(texts(&data), 4096, 1).unwrap();
    let pool: Vec<String> = vocab.words()[6..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_pad, mut rows) = (0.0f64, 0.0f64, 0usize);
    for pair in 0..200 {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 3,
            heads: [1, 2, 4][pair % 3],
            ffn: 32,
            vocab_size: vocab.len(),
            max_positions: 64,
            decoder_layers: 1,
            local_layer: 2,
            init_std: [0.02, 0.2, 1.0][pair % 3],
            ..ModelConfig::default()
        };
        let m = Model32::new(cfg, vocab.clone(), rng.random()).unwrap();
        let sample = |rng: &mut ChaCha8Rng, n: usize| {
            (0..n).map(|_| pool.choose(rng).unwrap().clone()).collect::<Vec<_>>().join(" ")
        };
        let (qn, dn) = (rng.random_range(1..10), rng.random_range(1..40));
        let (q, d) = (sample(&mut rng, qn), sample(&mut rng, dn));
        let tq = tokenize(&q, &vocab, 16, Role::Encoder);
        let td = tokenize(&d, &vocab, 48, Role::Encoder);
        let (qpad, dpad) = (rng.random_range(0..4), rng.random_range(0..14));
        let td = td.padded(td.len() + dpad);
        let enc = m.encode_document(&td).unwrap();
        let f = m.fuse(&tq.padded(tq.len() + qpad), &enc).unwrap();
        let a = &f.attn;
        for l in 0..a.layers {
            for h in 0..a.heads {
                for i in (0..a.q_len).filter(|&i| a.query_mask[i]) {
                    let row = a.row(l, h, i);
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                    for (j, &w) in row.iter().enumerate() {
                        if !a.doc_mask[j] {
                            worst_pad = worst_pad.max(w.abs());
                        }
                    }
                    rows += 1;
                }
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(60), started);
    outcome(
        worst_sum <= 1e-5 && worst_pad == 0.0 && fast,
        format!("200 pairs, {rows} rows: max |row sum - 1| {worst_sum:.1e} (tol 1e-5), max padded weight {worst_pad:e}; {time}"),
    )
}

// ---------------------------------------------------------------- 3

fn retrieval_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=2000);
        let dim = rng.random_range(2..=24);
        let mut raw: Vec<Vec<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && rng.random_bool(0.1) {
                let j = rng.random_range(0..i);
                raw.push(raw[j].clone());
                continue;
            }
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            raw.push(v.iter().map(|x| (x / norm) as f32).collect());
        }
        let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        let index = EmbeddingIndex::from_rows(ids, dim, raw.concat(), 0).unwrap();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(1..=n + 5);
        let got = index.search_embedding(&q, k).unwrap();

        let mut oracle: Vec<(usize, f64)> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut s = 0.0;
                for (a, b) in r.iter().zip(&q) {
                    s += f64::from(*a) * b;
                }
                (i, s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ties += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        oracle.truncate(k);
        let same = got.hits.len() == oracle.len()
            && got.hits.iter().zip(&oracle).all(|(h, (i, s))| h.ordinal == *i && h.score.to_bits() == s.to_bits());
        mismatches += usize::from(!same);
    }
    let (fast, time) = within(Duration::from_secs(60), started);
    outcome(
        mismatches == 0 && ties > 0 && fast,
        format!("50 corpora (N <= 2000, {ties} exact score ties): {mismatches} differ from full sort; {time}"),
    )
}

// ---------------------------------------------------------------- 4

fn overfit() -> Outcome {
    let started = Instant::now();
    let data = qar_triples(64, 4);
    let vocab = Vocabulary::build(texts(&data), 8192, 1).unwrap();
    let cfg = ModelConfig {
        hidden: 32,
        layers: 2,
        heads: 2,
        ffn: 64,
        vocab_size: vocab.len(),
        max_positions: 48,
        decoder_layers: 1,
        local_layer: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 16,
        epochs: 75,
        queue_size: 64,
        peak_lr: 3e-3,
        warmup_lr: 3e-4,
        min_lr: 3e-4,
        warmup_steps: 20,
        max_query_len: 16,
        max_doc_len: 48,
        max_target_len: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer32::new(Model32::new(cfg, vocab, 4).unwrap(), tc.clone(), data.len()).unwrap();
    let reports = t.fit(&data, |_| {}).unwrap();
    let first = reports[0].l_total;
    let last_epoch = &reports[reports.len() - t.steps_per_epoch()..];
    let last = last_epoch.iter().map(|r| r.l_total).sum::<f64>() / last_epoch.len() as f64;
    let index = build_index(&t.model, &documents(&data), tc.max_doc_len).unwrap();
    let recall = evaluate_global(&index, &t.model, &data, &[1], tc.max_query_len).unwrap().metric("R@1").unwrap();
    let dc = DecodeConfig { max_new_tokens: 8, max_query_len: 16, max_doc_len: 48, ..DecodeConfig::default() };
    let em = evaluate_generation(&t.model, &data, &dc).unwrap().metric("EM").unwrap();
    let drop = 1.0 - last / first;
    let (fast, time) = within(Duration::from_secs(600), started);
    outcome(
        reports.len() == 300 && drop >= 0.5 && recall >= 0.9 && em >= 0.8 && fast,
        format!(
            "{} steps: L_total {first:.3} -> {last:.3} (drop {:.0}%, need 50%), global R@1 {recall:.3} (need 0.9), greedy EM {em:.3} (need 0.8); {time}",
            reports.len(),
            drop * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

struct DirectionRun {
    baseline: f64,
    /// Per seed: (α=0.25 by-layer recall, α=0 by-layer recall).
    seeds: Vec<(u64, Vec<f64>, Vec<f64>)>,
    elapsed: Duration,
}

fn direction_runs() -> DirectionRun {
    let started = Instant::now();
    let all = rir_triples(2400, 0);
    let train = &all[..2000];
    let seen: HashSet<&str> = train.iter().map(|t| t.doc_id.as_str()).collect();
    let test: Vec<Triple> = all[2000..].iter().filter(|t| !seen.contains(t.doc_id.as_str())).cloned().collect();
    let vocab = Vocabulary::build(texts(&all), 8192, 1).unwrap();
    assert!(vocab.len() <= 8192);
    let baseline = test.iter().map(|t| 1.0 / t.document().num_sentences() as f64).sum::<f64>() / test.len() as f64;
    let lc = LocateConfig { max_doc_len: 112, ..LocateConfig::default() };
    let mut seeds = Vec::new();
    for seed in 1..=5u64 {
        let mut by_alpha = Vec::new();
        for alpha in [0.25, 0.0] {
            let cfg = ModelConfig {
                hidden: 32,
                layers: 4,
                heads: 2,
                ffn: 64,
                vocab_size: vocab.len(),
                max_positions: 112,
                decoder_layers: 1,
                local_layer: 3,
                ..ModelConfig::default()
            };
            let tc = TrainConfig {
                alpha,
                batch_size: 8,
                epochs: 3,
                peak_lr: 3e-3,
                warmup_lr: 3e-4,
                min_lr: 3e-4,
                warmup_steps: 30,
                max_doc_len: 112,
                max_target_len: 24,
                seed,
                ..TrainConfig::default()
            };
            let mut t = Trainer32::new(Model32::new(cfg, vocab.clone(), seed).unwrap(), tc, train.len()).unwrap();
            t.fit(train, |_| {}).unwrap();
            by_alpha.push(local_recall_by_layer(&t.model, &test, 1, &lc).unwrap());
        }
        let zero = by_alpha.pop().unwrap();
        seeds.push((seed, by_alpha.pop().unwrap(), zero));
    }
    DirectionRun { baseline, seeds, elapsed: started.elapsed() }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn lm_direction(r: &DirectionRun) -> Outcome {
    let local = 2;
    let mut ordered = 0;
    let mut parts = Vec::new();
    for (seed, with, without) in &r.seeds {
        ordered += usize::from(with[local] > without[local]);
        parts.push(format!("s{seed} {:.3} vs {:.3}", with[local], without[local]));
    }
    let n = r.seeds.len() as f64;
    let m_with = r.seeds.iter().map(|s| s.1[local]).sum::<f64>() / n;
    let m_without = r.seeds.iter().map(|s| s.2[local]).sum::<f64>() / n;
    let floor = 2.0 * r.baseline;
    let fast = r.elapsed < Duration::from_secs(7200);
    outcome(
        ordered >= 4 && m_with >= floor && m_without >= floor && fast,
        format!(
            "local R@1 at layer 3, alpha 0.25 vs 0: {}; ordering on {ordered}/5 (need 4); means {m_with:.3} / {m_without:.3} vs 2x random {floor:.3}; {:.0}s of 7200s",
            parts.join(", "),
            r.elapsed.as_secs_f64()
        ),
    )
}

fn layer_profile(r: &DirectionRun) -> Outcome {
    let layers = r.seeds[0].1.len();
    let upper = r.seeds.iter().filter(|s| argmax(&s.1) >= layers / 2).count();
    let parts: Vec<String> =
        r.seeds.iter().map(|s| format!("s{} [{}] peak {}", s.0, fmt(&s.1), argmax(&s.1) + 1)).collect();
    outcome(
        upper >= 4,
        format!(
            "alpha 0.25 by-layer R@1: {}; peak in layers {}..={layers} on {upper}/5 (need 4)",
            parts.join("; "),
            layers / 2 + 1
        ),
    )
}

// ---------------------------------------------------------------- 7

fn schedule_numerics() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 10_000;
    let lr = [lr_at(0, &cfg, total), lr_at(1000, &cfg, total), lr_at(total, &cfg, total)];
    let lr_ok = lr == [1e-6, 1e-5, 1e-6];

    let m = 0.995;
    let mut online = ParamStore::<f64>::new();
    online.insert("embed.tokens", Tensor::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.0]).unwrap());
    let mut mom = ParamStore::<f64>::new();
    mom.insert("embed.tokens", Tensor::from_f64(&[2, 2], &[3.0, 1.0, -2.0, 0.25]).unwrap());
    let start = mom.expect("embed.tokens").data().to_vec();
    let target = online.expect("embed.tokens").data().to_vec();
    let mut worst = 0.0f64;
    for n in 1..=500 {
        momentum_update(&online, &mut mom, m);
        for ((got, s), t) in mom.expect("embed.tokens").data().iter().zip(&start).zip(&target) {
            let closed = t + (s - t) * m.powi(n);
            worst = worst.max((got - closed).abs());
        }
    }
    let spe = 250;
    let w = [0, 1, 2].map(|e| soft_label_weight(e * spe, spe, cfg.soft_label_max, cfg.soft_label_ramp_epochs));
    let w_ok = w == [0.0, 0.2, 0.4];
    outcome(
        lr_ok && worst < 1e-12 && w_ok,
        format!(
            "lr at 0/1000/final = {:e}/{:e}/{:e}; momentum closed form over 500 updates max err {worst:.1e} (tol 1e-12); soft weight at epochs 0/1/2 = {}/{}/{}",
            lr[0], lr[1], lr[2], w[0], w[1], w[2]
        ),
    )
}

// ---------------------------------------------------------------- 8

struct FixtureRewriter;

impl Rewriter for FixtureRewriter {
    fn rewrite(&self, sentence: &str) -> gear_core::Result<String> {
        if sentence.contains("failmarker") {
            return Err(GearError::Rewrite("service unavailable".into()));
        }
        RuleRewriter.rewrite(sentence)
    }
}

struct FixtureRelevance;

impl RelevanceModel for FixtureRelevance {
    fn relevance(&self, query: &str, doc: &Document) -> gear_core::Result<f64> {
        if doc.id.starts_with("lowrel") {
            Ok(0.49)
        } else if doc.id.starts_with("edge") {
            Ok(0.5)
        } else {
            LexicalRelevance.relevance(query, doc)
        }
    }
}

/// 26 tokens, never a candidate.
fn filler(tag: &str, i: usize) -> String {
    let body: Vec<String> = (0..23).map(|k| format!("{tag}f{i}w{k}")).collect();
    format!("The records {} end.", body.join(" "))
}

/// 13 tokens, always a candidate.
fn unit(tag: &str, i: usize) -> String {
    format!("The harbor council of {tag}u{i} approved a bright lighthouse near the pier.")
}

fn body(tag: &str, fillers: usize, extra: &[String]) -> String {
    let mut s: Vec<String> = extra.to_vec();
    s.extend((0..fillers).map(|i| filler(tag, i)));
    s.join(" ")
}

fn fixture_corpus() -> Vec<CorpusRecord> {
    let rec = |id: String, text: String| CorpusRecord { id, text };
    let mut out = Vec::new();
    let ineligible = |tag: &str| {
        vec![
            format!("It was built by the {tag} masons in the old town square."),
            format!("However they rebuilt the {tag} tower after the long winter storm."),
            format!("Short {tag} line here."),
        ]
    };
    // two sentences, one of them repeated or broken by line-break runs
    out.push(rec("few0".into(), format!("{} {}", filler("a", 0), filler("a", 1))));
    out.push(rec("few1".into(), format!("{} {} {}", filler("b", 0), filler("b", 1), filler("b", 0))));
    out.push(rec("few2".into(), format!("{} \n\n\n. {}", filler("c", 0), filler("c", 1))));
    for i in 0..3 {
        let tag = format!("s{i}");
        out.push(rec(format!("short{i}"), (0..4).map(|k| unit(&tag, k)).collect::<Vec<_>>().join(" ")));
    }
    for i in 0..3 {
        let tag = format!("n{i}");
        let mut extra = ineligible(&tag);
        extra.push(unit(&tag, 0));
        extra.push(unit(&tag, 1));
        out.push(rec(format!("nocand{i}"), body(&tag, 7, &extra)));
    }
    for i in 0..21 {
        let tag = format!("k{i}");
        let id = match i {
            0 | 1 => format!("lowrel{i}"),
            2 => "edge".to_string(),
            _ => format!("ok{i}"),
        };
        let mut units =
            vec![unit(&tag, 0), unit(&tag, 1), format!("The {tag}tree, the avl {tag}tree and the {tag}tree house.")];
        match i {
            3 | 4 => units[1] = "But it was not to be, and it had been.".to_string(),
            5 | 6 => units[0] = format!("The failmarker {tag} sentence goes to the broken service."),
            _ => {}
        }
        let mut extra = ineligible(&tag);
        extra.extend(units);
        let fillers = if i == 7 { 30 } else { 7 };
        out.push(rec(id, body(&tag, fillers, &extra)));
    }
    out
}

fn pipeline_fidelity() -> Outcome {
    let cfg = FilterConfig::default();
    let corpus = fixture_corpus();
    let (triples, stats) = synthesize(&corpus, &cfg, &FixtureRewriter, &FixtureRelevance).unwrap();
    let expected_docs = BTreeMap::from([
        (RejectReason::TooShort, 3),
        (RejectReason::TooFewSentences, 3),
        (RejectReason::InsufficientCandidates, 3),
    ]);
    let expected_units = BTreeMap::from([
        (RejectReason::EmptyRewrite, 2),
        (RejectReason::RewriteFailed, 2),
        (RejectReason::LowRelevance, 6),
    ]);
    let ledger_ok = stats.input_docs == 30
        && stats.accepted_docs == 21
        && stats.doc_rejections == expected_docs
        && stats.candidates == 63
        && stats.candidate_rejections == expected_units
        && stats.triples == 53
        && triples.len() == 53
        && stats.is_consistent();

    let mut invalid = Vec::new();
    for t in &triples {
        let doc = t.document();
        let re = preprocess_document(&t.doc_id, &t.doc_text, &cfg);
        let stable = re.as_ref().is_ok_and(|d| d.text == t.doc_text);
        let size_ok = doc.num_sentences() >= cfg.min_sentences
            && (cfg.min_doc_tokens..=cfg.max_doc_tokens).contains(&doc.token_count());
        let unit_ok = t.unit_index < doc.num_sentences()
            && doc.sentence(t.unit_index) == t.target
            && is_candidate(&t.target, &cfg);
        let keys: Vec<String> = t.query.split(',').map(|k| k.trim().to_lowercase()).collect();
        let dedup_ok = keys.iter().collect::<HashSet<_>>().len() == keys.len() && dedupe_keywords(&t.query) == t.query;
        let rel_ok = FixtureRelevance.relevance(&t.query, &doc).unwrap() >= cfg.relevance_threshold;
        if !(stable && size_ok && unit_ok && dedup_ok && rel_ok) {
            invalid.push(format!("{}:{}", t.doc_id, t.unit_index));
        }
    }
    let truncated = triples.iter().find(|t| t.doc_id == "ok7").map(|t| t.document().token_count());
    let rerun = synthesize(&corpus, &cfg, &FixtureRewriter, &FixtureRelevance).unwrap().0 == triples;
    outcome(
        ledger_ok && invalid.is_empty() && truncated.is_some_and(|n| n <= 500) && rerun,
        format!(
            "30 docs: accepted {}, doc rejections {:?}, candidates {}, candidate rejections {:?}, triples {}; {} triples fail re-validation; 500-token cap kept {:?} tokens",
            stats.accepted_docs,
            stats.doc_rejections,
            stats.candidates,
            stats.candidate_rejections,
            stats.triples,
            invalid.len(),
            truncated
        ),
    )
}

// ---------------------------------------------------------------- 9

fn metric_fixtures() -> Outcome {
    let eq = |a: f64, b: f64| (a - b).abs() < 1e-15;
    let ranked: Vec<u32> = (1..=10).collect();
    let fixtures = [
        recall_at_k(&ranked, &[1], 5).unwrap() == 1.0,
        recall_at_k(&ranked, &[6], 5).unwrap() == 0.0,
        [1, 2, 7, 9].iter().map(|&g| recall_at_k(&ranked, &[g], 5).unwrap()).sum::<f64>() / 4.0 == 0.5,
        map_at_k(&ranked, &[2], 5).unwrap() == 0.5,
        map_at_k(&ranked, &[6], 5).unwrap() == 0.0,
        eq(map_at_k(&["a", "x", "b"], &["a", "b"], 3).unwrap(), (1.0 + 2.0 / 3.0) / 2.0),
        recall_at_k(&ranked, &[], 5).is_err() && map_at_k(&ranked, &[], 5).is_err(),
        exact_match("Paris.", "paris") == 1.0 && f1("Paris.", "paris") == 1.0,
        eq(f1("cat sat", "the cat sat down"), 0.8),
        exact_match("dog", "cat") == 0.0 && f1("dog", "cat") == 0.0,
        exact_match("", "") == 1.0 && f1("", "") == 1.0,
        rouge_1("the cat sat", "the cat sat") == 1.0 && rouge_l("the cat sat", "the cat sat") == 1.0,
        eq(rouge_l("the cat sat", "the cat ran"), 2.0 / 3.0),
        rouge_1("", "the cat") == 0.0 && rouge_l("", "the cat") == 0.0,
    ];
    let fixtures_ok = fixtures.iter().filter(|&&b| b).count();

    let vocab = ["the", "a", "cat", "sat", "on", "mat", "dog", "ran", "Paris", "park", ".", ",", "!"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gen = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..9);
        (0..n).map(|_| *vocab.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let mut violations = 0;
    for _ in 0..1000 {
        let (p, g) = (gen(&mut rng), gen(&mut rng));
        let (em, f, r1, rl) = (exact_match(&p, &g), f1(&p, &g), rouge_1(&p, &g), rouge_l(&p, &g));
        let in_range = [em, f, r1, rl].iter().all(|v| (0.0..=1.0).contains(v));
        let n = rng.random_range(1..15);
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.shuffle(&mut rng);
        let gold = [rng.random_range(0..n + 3)];
        let k = rng.random_range(1..n + 3);
        let (r, m) = (recall_at_k(&ranking, &gold, k).unwrap(), map_at_k(&ranking, &gold, k).unwrap());
        if !(in_range && f >= em && rl <= r1 + 1e-15 && m <= r) {
            violations += 1;
        }
    }
    outcome(
        fixtures_ok == fixtures.len() && violations == 0,
        format!(
            "{fixtures_ok}/{} hand fixtures exact; 1000 random pairs: {violations} violations of MAP <= Recall, F1 >= EM, ROUGE-L <= ROUGE-1",
            fixtures.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn round_trips() -> Outcome {
    let data = qar_triples(6, 10);
    let vocab = Vocabulary::build(texts(&data), 512, 1).unwrap();
    let cfg = ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        vocab_size: vocab.len(),
        max_positions: 40,
        decoder_layers: 1,
        local_layer: 1,
        ..ModelConfig::default()
    };
    let mut model = Model32::new(cfg, vocab, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-1e-3f32..1e-3);
        }
    }
    let meta = serde_json::json!({ "note": "acceptance" });
    let bytes = to_bytes(&model, &meta);
    let (back, back_meta) = from_bytes::<f32>(&bytes, None).unwrap();
    let bits = |m: &Model32| -> Vec<u32> {
        m.params.iter().chain(m.momentum.iter()).flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let ckpt_exact = bits(&back) == bits(&model)
        && back.fingerprint() == model.fingerprint()
        && back_meta == meta
        && to_bytes(&back, &back_meta) == bytes;

    let index = build_index(&model, &documents(&data), 40).unwrap();
    let ibytes = index.to_bytes();
    let iback = EmbeddingIndex::from_bytes(&ibytes).unwrap();
    let index_exact = iback == index && iback.to_bytes() == ibytes;

    let corrupt_all = |bytes: &[u8], parse: &dyn Fn(&[u8]) -> bool| -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut missed = 0;
        let mut buf = bytes.to_vec();
        for i in 0..bytes.len() {
            let flip = rng.random_range(1..=255u8);
            buf[i] ^= flip;
            missed += usize::from(parse(&buf));
            buf[i] ^= flip;
        }
        missed
    };
    let ckpt_missed = corrupt_all(&bytes, &|b| from_bytes::<f32>(b, None).is_ok());
    let index_missed = corrupt_all(&ibytes, &|b| EmbeddingIndex::from_bytes(b).is_ok());
    outcome(
        ckpt_exact && index_exact && ckpt_missed == 0 && index_missed == 0,
        format!(
            "checkpoint ({} bytes) and index ({} bytes) round-trip bit-exact: {ckpt_exact}/{index_exact}; every single-byte corruption: {ckpt_missed} + {index_missed} undetected",
            bytes.len(),
            ibytes.len()
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let names = [
        "gradient correctness",
        "attention invariants",
        "retrieval oracle equivalence",
        "overfit sanity",
        "LM objective direction of effect",
        "layer profile",
        "schedule and momentum numerics",
        "data pipeline fidelity",
        "metric fixtures",
        "checkpoint and index round-trips",
    ];
    let direction = if want(5) || want(6) { Some(direction_runs()) } else { None };
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !want(n) {
            continue;
        }
        let started = Instant::now();
        let o = match n {
            1 => gradients(),
            2 => attention_invariants(),
            3 => retrieval_oracle(),
            4 => overfit(),
            5 => lm_direction(direction.as_ref().unwrap()),
            6 => layer_profile(direction.as_ref().unwrap()),
            7 => schedule_numerics(),
            8 => pipeline_fidelity(),
            9 => metric_fixtures(),
            _ => round_trips(),
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} {name} ({:.1}s): {}", started.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
