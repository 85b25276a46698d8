use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::ArgMatches;
use gear_core::datasynth::{
    synthesize, EncoderRelevance, LexicalRelevance, RelevanceModel, Rewriter, RuleRewriter, ServiceRewriter,
};
use gear_core::eval::{evaluate_generation, evaluate_global, evaluate_local, local_recall_by_layer, EvalReport};
use gear_core::generation::{batch_generate, generate};
use gear_core::model::{load_checkpoint, save_checkpoint};
use gear_core::records::{read_jsonl, write_jsonl, CorpusRecord, Triple};
use gear_core::retrieval::{build_index, highlight_report, locate, EmbeddingIndex};
use gear_core::text::{Document, Vocabulary};
use gear_core::{GearError, Model32, Trainer32};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Cli, Cmd, DocOpts};
use crate::config::{RelevanceKind, RewriterKind, RunConfig};
use crate::{CliError, Timer};

type Res<T = ()> = Result<T, CliError>;

/// The flag if given, else the config path, else a usage error.
fn require(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Res<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{what} is required (or set it under [paths])")))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Res {
    fs::write(path, bytes).map_err(|e| GearError::io(path, e).into())
}

fn write_json(path: &Path, v: &impl Serialize) -> Res {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn write_meta(path: &Path, command: &str, run: &RunConfig, extra: Value) -> Res {
    write_json(&sidecar(path), &json!({ "command": command, "config": run.to_json(), "details": extra }))
}

fn read_values(path: &Path) -> Res<Vec<Value>> {
    Ok(read_jsonl::<Value>(path)?)
}

fn parse_records<T: serde::de::DeserializeOwned>(values: Vec<Value>) -> Res<Vec<T>> {
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|e| GearError::Record { line: i + 1, detail: e.to_string() }.into())
        })
        .collect()
}

/// Documents from corpus records or from the distinct documents of triples.
fn read_documents(path: &Path) -> Res<Vec<Document>> {
    let values = read_values(path)?;
    if values.first().is_some_and(|v| v.get("doc_id").is_some()) {
        let triples: Vec<Triple> = parse_records(values)?;
        let mut seen = HashSet::new();
        Ok(triples.iter().filter(|t| seen.insert(t.doc_id.clone())).map(Triple::document).collect())
    } else {
        let corpus: Vec<CorpusRecord> = parse_records(values)?;
        Ok(corpus.iter().map(CorpusRecord::document).collect())
    }
}

fn read_triples(path: &Path) -> Res<Vec<Triple>> {
    Ok(read_jsonl(path)?)
}

fn load_model(path: &Path) -> Res<(Model32, Value)> {
    Ok(load_checkpoint::<f32>(path, None)?)
}

/// The run config with `[model]` taken from the loaded checkpoint.
fn echo(run: &RunConfig, model: &Model32) -> RunConfig {
    RunConfig { model: model.config.clone(), ..run.clone() }
}

fn read_doc(d: &DocOpts) -> Res<Document> {
    let text = match (&d.doc, &d.doc_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p).map_err(|e| GearError::io(p, e))?,
        (None, None) => return Err(CliError::Usage("--doc or --doc-file is required".into())),
    };
    Ok(Document::new(d.doc_id.clone(), text))
}

fn dataset_name(given: &Option<String>, triples: &Path) -> String {
    given.clone().unwrap_or_else(|| triples.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn finish_report(
    mut report: EvalReport,
    started: Instant,
    timer: &Timer,
    run: &RunConfig,
    output: &Option<PathBuf>,
    extra: Option<(&str, Value)>,
) -> Res {
    if timer.enabled() {
        report.wall_clock = Some(started.elapsed().as_secs_f64());
    }
    println!("{}", report.table());
    if let Some(path) = output {
        let mut v = serde_json::to_value(&report).expect("report serializes");
        v["config"] = run.to_json();
        if let Some((k, x)) = extra {
            v[k] = x;
        }
        write_json(path, &v)?;
    }
    Ok(())
}

/// Loads the config file, layers the flags over it and validates the result.
fn effective_config(cli: &Cli, m: &ArgMatches) -> Res<RunConfig> {
    let mut run = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.cmd.apply(m, &mut run);
    run.finish()
}

pub fn run(cli: &Cli, m: &ArgMatches, timer: &Timer) -> Res {
    let run = effective_config(cli, m)?;
    let paths = &run.paths;
    match &cli.cmd {
        Cmd::BuildVocab(a) => {
            let input = a.input.clone().or_else(|| paths.triples.clone()).or_else(|| paths.corpus.clone());
            let input = input.ok_or_else(|| CliError::Usage("--input is required (or set it under [paths])".into()))?;
            let output = require(&a.output, &paths.vocab, "output")?;
            let values = timer.phase("read", || read_values(&input))?;
            let texts: Vec<String> = values
                .iter()
                .flat_map(|v| ["text", "query", "doc_text", "target"].map(|k| v.get(k).and_then(Value::as_str)))
                .flatten()
                .map(str::to_string)
                .collect();
            let vocab = timer.phase("build", || {
                Vocabulary::build(texts.iter().map(String::as_str), run.vocab.max_size, run.vocab.min_count)
            })?;
            vocab.save(&output)?;
            write_meta(
                &output,
                "build-vocab",
                &run,
                json!({ "entries": vocab.len(), "hash": format!("{:016x}", vocab.hash()) }),
            )?;
            println!("vocabulary: {} entries -> {}", vocab.len(), output.display());
        }
        Cmd::Synth(a) => {
            let corpus_path = require(&a.corpus, &paths.corpus, "corpus")?;
            let output = require(&a.output, &paths.triples, "output")?;
            let corpus: Vec<CorpusRecord> = timer.phase("read", || read_jsonl(&corpus_path))?;
            let rewriter: Box<dyn Rewriter> = match run.synth.rewriter {
                RewriterKind::Rule => Box::new(RuleRewriter),
                RewriterKind::Service => {
                    let url = run
                        .synth
                        .service_url
                        .clone()
                        .ok_or_else(|| CliError::Usage("the service rewriter needs --service-url".into()))?;
                    Box::new(ServiceRewriter::from_env(url, Duration::from_secs(run.synth.timeout_secs)))
                }
            };
            let model;
            let relevance: Box<dyn RelevanceModel + '_> = match run.synth.relevance {
                RelevanceKind::Lexical => Box::new(LexicalRelevance),
                RelevanceKind::Encoder => {
                    let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
                    model = load_model(&ckpt)?.0;
                    Box::new(EncoderRelevance {
                        model: &model,
                        max_query_len: run.train.max_query_len,
                        max_doc_len: run.train.max_doc_len,
                    })
                }
            };
            let (triples, stats) = timer
                .phase("synthesize", || synthesize(&corpus, &run.filter, rewriter.as_ref(), relevance.as_ref()))?;
            write_jsonl(&output, &triples)?;
            let stats = serde_json::to_value(&stats).expect("stats serialize");
            write_meta(&output, "synth", &run, json!({ "stats": stats }))?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Cmd::Train(a) => {
            let triples_path = require(&a.triples, &paths.triples, "triples")?;
            let output = require(&a.output, &paths.checkpoint, "output")?;
            let data = timer.phase("read", || read_triples(&triples_path))?;
            let vocab = match a.vocab.clone().or_else(|| paths.vocab.clone()) {
                Some(p) => Vocabulary::load(&p)?,
                None => {
                    let texts = data.iter().flat_map(|t| [t.query.as_str(), t.doc_text.as_str(), t.target.as_str()]);
                    Vocabulary::build(texts, run.vocab.max_size, run.vocab.min_count)?
                }
            };
            let mut run = run.clone();
            run.model.vocab_size = vocab.len();
            let model = Model32::new(run.model.clone(), vocab, run.train.seed)?;
            let mut trainer = Trainer32::new(model, run.train.clone(), data.len())?;
            let mut log = match &a.log {
                Some(p) => Some(std::io::BufWriter::new(fs::File::create(p).map_err(|e| GearError::io(p, e))?)),
                None => None,
            };
            let per_epoch = trainer.steps_per_epoch();
            let mut log_err = None;
            let reports = timer.phase("train", || {
                trainer.fit(&data, |r| {
                    if let Some(w) = log.as_mut() {
                        let line = serde_json::to_string(r).expect("report serializes");
                        if let Err(e) = writeln!(w, "{line}") {
                            log_err.get_or_insert(e);
                        }
                    }
                    if (r.step + 1) % per_epoch == 0 {
                        eprintln!(
                            "epoch {} step {} l_total {:.4} l_cl {:.4} l_lm {:.4}",
                            r.epoch + 1,
                            r.step + 1,
                            r.l_total,
                            r.l_cl,
                            r.l_lm
                        );
                    }
                })
            })?;
            if let Some(mut w) = log {
                w.flush().map_err(|e| GearError::io(a.log.clone().unwrap_or_default(), e))?;
            }
            if let Some(e) = log_err {
                return Err(GearError::io(a.log.clone().unwrap_or_default(), e).into());
            }
            let last = reports.last().cloned();
            let meta = json!({
                "command": "train",
                "config": run.to_json(),
                "triples": data.len(),
                "steps": reports.len(),
                "final": last,
            });
            timer.phase("save", || save_checkpoint(&trainer.model, &meta, &output))?;
            println!(
                "trained {} steps, final l_total {:.4}, fingerprint {:016x} -> {}",
                reports.len(),
                last.map_or(f64::NAN, |r| r.l_total),
                trainer.model.fingerprint(),
                output.display()
            );
        }
        Cmd::Index(a) => {
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let input = a.input.clone().or_else(|| paths.corpus.clone()).or_else(|| paths.triples.clone());
            let input = input.ok_or_else(|| CliError::Usage("--input is required (or set it under [paths])".into()))?;
            let output = require(&a.output, &paths.index, "output")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let docs = timer.phase("read", || read_documents(&input))?;
            let index = timer.phase("encode", || build_index(&model, &docs, run.train.max_doc_len))?;
            index.save(&output)?;
            write_meta(
                &output,
                "index",
                &echo(&run, &model),
                json!({ "documents": index.len(), "fingerprint": format!("{:016x}", index.fingerprint()) }),
            )?;
            println!("indexed {} documents -> {}", index.len(), output.display());
        }
        Cmd::Search(a) => {
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let index_path = require(&a.index, &paths.index, "index")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let index = EmbeddingIndex::load(&index_path)?;
            let res = timer.phase("search", || index.search(&model, &a.query, a.k, run.train.max_query_len))?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&res).expect("hits serialize"));
            } else {
                for (i, h) in res.hits.iter().enumerate() {
                    println!("{:>4}  {:.6}  {}", i + 1, h.score, h.id);
                }
            }
        }
        Cmd::Locate(a) => {
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let doc = read_doc(&a.doc)?;
            let ranking = timer.phase("locate", || locate(&model, &a.query, &doc, &run.locate))?;
            let report = highlight_report(&doc, &ranking, a.top_tokens);
            let layer = run.locate.layer.unwrap_or(model.config.local_layer);
            println!("query: {}\nlayer: {layer}\n{}", a.query, report.text);
            if let Some(p) = &a.html {
                write_file(p, report.html.as_bytes())?;
            }
            if let Some(p) = &a.output {
                write_json(
                    p,
                    &json!({
                        "query": a.query,
                        "layer": layer,
                        "ranking": ranking,
                        "annotated": report.annotated,
                        "marked": report.marked.iter().map(|s| [s.start, s.end]).collect::<Vec<_>>(),
                        "config": echo(&run, &model).to_json(),
                    }),
                )?;
            }
        }
        Cmd::Generate(a) => {
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            match (&a.query, &a.triples) {
                (Some(q), _) => {
                    let doc = read_doc(&a.doc)?;
                    println!("{}", timer.phase("generate", || generate(&model, q, &doc, &run.decode))?);
                }
                (None, Some(path)) => {
                    let data = read_triples(path)?;
                    let items: Vec<(String, Document)> = data.iter().map(|t| (t.query.clone(), t.document())).collect();
                    let preds = timer.phase("generate", || batch_generate(&model, &items, &run.decode))?;
                    let rows: Vec<Value> = data
                        .iter()
                        .zip(&preds)
                        .map(|(t, p)| json!({ "query": t.query, "doc_id": t.doc_id, "prediction": p }))
                        .collect();
                    match &a.output {
                        Some(out) => {
                            write_jsonl(out, &rows)?;
                            write_meta(out, "generate", &echo(&run, &model), json!({ "items": rows.len() }))?;
                        }
                        None => {
                            for r in &rows {
                                println!("{r}");
                            }
                        }
                    }
                }
                (None, None) => return Err(CliError::Usage("give --query with a document, or --triples".into())),
            }
        }
        Cmd::EvalGlobal(a) => {
            let started = Instant::now();
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let index_path = require(&a.index, &paths.index, "index")?;
            let triples_path = require(&a.triples, &paths.triples, "triples")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let index = EmbeddingIndex::load(&index_path)?;
            let data = read_triples(&triples_path)?;
            let report = timer
                .phase("evaluate", || evaluate_global(&index, &model, &data, &run.eval.ks, run.train.max_query_len))?
                .with_dataset(dataset_name(&a.dataset, &triples_path));
            finish_report(report, started, timer, &echo(&run, &model), &a.output, None)?;
        }
        Cmd::EvalLocal(a) => {
            let started = Instant::now();
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let triples_path = require(&a.triples, &paths.triples, "triples")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let data = read_triples(&triples_path)?;
            let report = timer
                .phase("evaluate", || evaluate_local(&model, &data, &run.eval.ks, &run.locate))?
                .with_dataset(dataset_name(&a.dataset, &triples_path));
            let extra = if a.by_layer {
                let k = run.eval.ks[0];
                let per = timer.phase("layers", || local_recall_by_layer(&model, &data, k, &run.locate))?;
                for (l, r) in per.iter().enumerate() {
                    println!("layer {:>2}  R@{k} {r:.4}", l + 1);
                }
                Some(("by_layer", json!({ "k": k, "recall": per })))
            } else {
                None
            };
            finish_report(report, started, timer, &echo(&run, &model), &a.output, extra)?;
        }
        Cmd::EvalGen(a) => {
            let started = Instant::now();
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let triples_path = require(&a.triples, &paths.triples, "triples")?;
            let (model, _) = timer.phase("load", || load_model(&ckpt))?;
            let data = read_triples(&triples_path)?;
            let report = timer
                .phase("evaluate", || evaluate_generation(&model, &data, &run.decode))?
                .with_dataset(dataset_name(&a.dataset, &triples_path));
            finish_report(report, started, timer, &echo(&run, &model), &a.output, None)?;
        }
        Cmd::Inspect(a) => {
            let ckpt = require(&a.checkpoint, &paths.checkpoint, "checkpoint")?;
            let (model, meta) = timer.phase("load", || load_model(&ckpt))?;
            let c = &model.config;
            println!("checkpoint: {}", ckpt.display());
            println!("fingerprint: {:016x}", model.fingerprint());
            println!("vocabulary: {} entries, hash {:016x}", model.vocab.len(), model.vocab.hash());
            println!(
                "architecture: hidden {} layers {} heads {} ffn {} decoder layers {} max positions {} local layer {}",
                c.hidden, c.layers, c.heads, c.ffn, c.decoder_layers, c.max_positions, c.local_layer
            );
            println!(
                "parameters: {} online arrays ({} values), {} momentum arrays",
                model.params.len(),
                model.params.num_values(),
                model.momentum.len()
            );
            println!("temperature: {:.6}", model.tau());
            println!("meta: {}", serde_json::to_string_pretty(&meta).expect("meta serializes"));
            if let Some(q) = &a.query {
                let doc = read_doc(&a.doc)?;
                let ranking = locate(&model, q, &doc, &run.locate)?;
                let layer = run.locate.layer.unwrap_or(c.local_layer);
                println!("\nquery: {q}\nlayer: {layer}\n{}", highlight_report(&doc, &ranking, a.top_tokens).text);
            }
        }
    }
    Ok(())
}
