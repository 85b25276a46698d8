use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand, ValueEnum};
use gear_core::datasynth::FilterConfig;
use gear_core::generation::{DecodeConfig, Strategy};
use gear_core::model::ModelConfig;
use gear_core::retrieval::{Aggregation, LocateConfig};
use gear_core::training::TrainConfig;

use crate::config::{EvalConfig, RelevanceKind, RewriterKind, RunConfig, SynthConfig, VocabConfig};

fn given(m: &ArgMatches, id: &str) -> bool {
    m.try_get_raw(id).is_ok() && m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Copies each listed field from the parsed flags into the config, but only
/// when the flag was actually typed.
macro_rules! merge {
    ($m:expr, $src:expr => $dst:expr; $($f:ident),+ $(,)?) => {
        $( if given($m, stringify!($f)) { $dst.$f = $src.$f.clone(); } )+
    };
}

#[derive(Parser, Debug)]
#[command(name = "gear", version, about = "Joint retrieval, sentence localization and generation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML file with [paths], [vocab], [model], [train], [filter], [synth],
    /// [decode], [locate] and [eval] sections; flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print per-phase wall-clock to stderr.
    #[arg(long, global = true)]
    pub time: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub lanes: usize,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Build a vocabulary from corpus or triple records.
    BuildVocab(BuildVocabArgs),
    /// Turn a corpus into (query, document, sentence) triples.
    Synth(SynthArgs),
    /// Train a model on triples.
    Train(TrainArgs),
    /// Embed documents into a flat index.
    Index(IndexArgs),
    /// Rank indexed documents for a query.
    Search(SearchArgs),
    /// Rank the sentences of one document and highlight its top tokens.
    Locate(LocateArgs),
    /// Generate text for a query and document, or for every triple in a file.
    Generate(GenerateArgs),
    /// Document retrieval Recall@k and MAP@k.
    EvalGlobal(EvalGlobalArgs),
    /// Sentence localization Recall@k and MAP@k, with a chunked baseline.
    EvalLocal(EvalLocalArgs),
    /// Exact match, F1, ROUGE-1 and ROUGE-L of generated text.
    EvalGen(EvalGenArgs),
    /// Summarize a checkpoint, optionally with a highlight for one query.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = ModelConfig::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = ModelConfig::default().layers)]
    pub layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().ffn)]
    pub ffn: usize,
    #[arg(long, default_value_t = ModelConfig::default().max_positions)]
    pub max_positions: usize,
    #[arg(long, default_value_t = ModelConfig::default().decoder_layers)]
    pub decoder_layers: usize,
    /// 1-based fusion layer used for localization.
    #[arg(long, default_value_t = ModelConfig::default().local_layer)]
    pub local_layer: usize,
    #[arg(long, default_value_t = ModelConfig::default().tau_init)]
    pub tau_init: f64,
    #[arg(long, default_value_t = ModelConfig::default().init_std)]
    pub init_std: f64,
}

impl ModelArgs {
    fn apply(&self, m: &ArgMatches, c: &mut ModelConfig) {
        merge!(m, self => c; hidden, layers, heads, ffn, max_positions, decoder_layers, local_layer, tau_init, init_std);
    }
}

#[derive(Args, Debug)]
pub struct TrainOpts {
    /// Weight of the language-modeling loss; 0 trains contrastively only.
    #[arg(long, default_value_t = TrainConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().peak_lr)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_steps)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().warmup_lr)]
    pub warmup_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().min_lr)]
    pub min_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().queue_size)]
    pub queue_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().soft_label_max)]
    pub soft_label_max: f64,
    #[arg(long, default_value_t = TrainConfig::default().clip_norm)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = TrainConfig::default().max_query_len)]
    pub max_query_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_doc_len)]
    pub max_doc_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_target_len)]
    pub max_target_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
}

impl TrainOpts {
    fn apply(&self, m: &ArgMatches, c: &mut RunConfig) {
        let t = &mut c.train;
        merge!(m, self => t; alpha, batch_size, epochs, peak_lr, warmup_steps, warmup_lr, min_lr, weight_decay,
            momentum, queue_size, soft_label_max, clip_norm, max_query_len, max_doc_len, max_target_len);
        if given(m, "seed") {
            c.seed = Some(self.seed);
        }
    }
}

/// Encoding lengths for indexing and search; they live in `[train]`.
#[derive(Args, Debug)]
pub struct EncodeOpts {
    #[arg(long, default_value_t = TrainConfig::default().max_query_len)]
    pub max_query_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_doc_len)]
    pub max_doc_len: usize,
}

impl EncodeOpts {
    fn apply(&self, m: &ArgMatches, c: &mut TrainConfig) {
        merge!(m, self => c; max_query_len, max_doc_len);
    }
}

#[derive(Args, Debug)]
pub struct FilterOpts {
    #[arg(long, default_value_t = FilterConfig::default().min_sentences)]
    pub min_sentences: usize,
    #[arg(long, default_value_t = FilterConfig::default().min_doc_tokens)]
    pub min_doc_tokens: usize,
    #[arg(long, default_value_t = FilterConfig::default().max_doc_tokens)]
    pub max_doc_tokens: usize,
    #[arg(long, default_value_t = FilterConfig::default().min_candidate_tokens)]
    pub min_candidate_tokens: usize,
    #[arg(long, default_value_t = FilterConfig::default().max_candidate_tokens)]
    pub max_candidate_tokens: usize,
    /// Inclusive lower bound on query/document relevance.
    #[arg(long, default_value_t = FilterConfig::default().relevance_threshold)]
    pub relevance_threshold: f64,
    #[arg(long, default_value_t = FilterConfig::default().candidates_per_doc)]
    pub candidates_per_doc: usize,
    #[arg(long, value_enum, default_value_t = SynthConfig::default().rewriter)]
    pub rewriter: RewriterKind,
    /// Endpoint of the service rewriter; the token comes from GEAR_REWRITER_TOKEN.
    #[arg(long)]
    pub service_url: Option<String>,
    #[arg(long, default_value_t = SynthConfig::default().timeout_secs)]
    pub timeout_secs: u64,
    /// `encoder` needs --checkpoint.
    #[arg(long, value_enum, default_value_t = SynthConfig::default().relevance)]
    pub relevance: RelevanceKind,
    #[arg(long, default_value_t = FilterConfig::default().seed)]
    pub seed: u64,
}

impl FilterOpts {
    fn apply(&self, m: &ArgMatches, c: &mut RunConfig) {
        let f = &mut c.filter;
        merge!(m, self => f; min_sentences, min_doc_tokens, max_doc_tokens, min_candidate_tokens,
            max_candidate_tokens, relevance_threshold, candidates_per_doc);
        let s = &mut c.synth;
        merge!(m, self => s; rewriter, timeout_secs, relevance);
        if self.service_url.is_some() {
            s.service_url = self.service_url.clone();
        }
        if given(m, "seed") {
            c.seed = Some(self.seed);
        }
    }
}

#[derive(Args, Debug)]
pub struct DecodeOpts {
    #[arg(long, default_value_t = DecodeConfig::default().max_new_tokens)]
    pub max_new_tokens: usize,
    /// 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    pub beam_width: usize,
    #[arg(long, default_value_t = DecodeConfig::default().length_penalty)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = DecodeConfig::default().max_query_len)]
    pub max_query_len: usize,
    #[arg(long, default_value_t = DecodeConfig::default().max_doc_len)]
    pub max_doc_len: usize,
}

impl DecodeOpts {
    fn apply(&self, m: &ArgMatches, c: &mut DecodeConfig) {
        merge!(m, self => c; max_new_tokens, length_penalty, max_query_len, max_doc_len);
        if given(m, "beam_width") {
            c.strategy = match self.beam_width {
                1 => Strategy::Greedy,
                width => Strategy::Beam { width },
            };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Mean,
    Sum,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Sum => Aggregation::Sum,
        }
    }
}

#[derive(Args, Debug)]
pub struct LocateOpts {
    /// 1-based fusion layer; defaults to the checkpoint's local layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value_t = AggregationArg::Mean)]
    pub aggregation: AggregationArg,
    #[arg(long, default_value_t = LocateConfig::default().max_query_len)]
    pub max_query_len: usize,
    #[arg(long, default_value_t = LocateConfig::default().max_doc_len)]
    pub max_doc_len: usize,
}

impl LocateOpts {
    fn apply(&self, m: &ArgMatches, c: &mut LocateConfig) {
        merge!(m, self => c; max_query_len, max_doc_len);
        if self.layer.is_some() {
            c.layer = self.layer;
        }
        if given(m, "aggregation") {
            c.aggregation = self.aggregation.into();
        }
    }
}

#[derive(Args, Debug)]
pub struct KsOpt {
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = EvalConfig::default().ks)]
    pub ks: Vec<usize>,
}

/// A document given inline or as a plain-text file.
#[derive(Args, Debug)]
pub struct DocOpts {
    #[arg(long, group = "doc_source")]
    pub doc: Option<String>,
    #[arg(long, group = "doc_source")]
    pub doc_file: Option<PathBuf>,
    #[arg(long, default_value = "doc")]
    pub doc_id: String,
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    /// Corpus ({id, text}) or triple records; falls back to [paths].
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = VocabConfig::default().max_size)]
    pub max_size: usize,
    #[arg(long, default_value_t = VocabConfig::default().min_count)]
    pub min_count: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Model for `--relevance encoder`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub filter: FilterOpts,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub triples: Option<PathBuf>,
    /// Built from the triples when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Step reports as line-delimited JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus or triple records.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub encode: EncodeOpts,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Print the hits as JSON.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub encode: EncodeOpts,
}

#[derive(Args, Debug)]
pub struct LocateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub query: String,
    #[command(flatten)]
    pub doc: DocOpts,
    /// Tokens to highlight.
    #[arg(long, default_value_t = 10)]
    pub top_tokens: usize,
    /// Also write the report as HTML.
    #[arg(long)]
    pub html: Option<PathBuf>,
    /// Also write the ranking and report as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub locate: LocateOpts,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "doc_source")]
    pub query: Option<String>,
    #[command(flatten)]
    pub doc: DocOpts,
    /// Generate for every record of this triple file instead.
    #[arg(long, conflicts_with = "query")]
    pub triples: Option<PathBuf>,
    /// Predictions as line-delimited JSON (batch mode).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeOpts,
}

#[derive(Args, Debug)]
pub struct EvalGlobalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[command(flatten)]
    pub ks: KsOpt,
    /// Dataset label; defaults to the triple file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().max_query_len)]
    pub max_query_len: usize,
}

#[derive(Args, Debug)]
pub struct EvalLocalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[command(flatten)]
    pub ks: KsOpt,
    /// Also report Recall at the first cutoff for every layer.
    #[arg(long)]
    pub by_layer: bool,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub locate: LocateOpts,
}

#[derive(Args, Debug)]
pub struct EvalGenArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeOpts,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// With a document, print a highlight report for this query.
    #[arg(long, requires = "doc_source")]
    pub query: Option<String>,
    #[command(flatten)]
    pub doc: DocOpts,
    #[arg(long, default_value_t = 10)]
    pub top_tokens: usize,
    #[command(flatten)]
    pub locate: LocateOpts,
}

impl Cmd {
    /// Layers the command's flags over `c`.
    pub fn apply(&self, m: &ArgMatches, c: &mut RunConfig) {
        match self {
            Cmd::BuildVocab(a) => {
                let v = &mut c.vocab;
                merge!(m, a => v; max_size, min_count);
            }
            Cmd::Synth(a) => a.filter.apply(m, c),
            Cmd::Train(a) => {
                a.model.apply(m, &mut c.model);
                a.train.apply(m, c);
            }
            Cmd::Index(a) => a.encode.apply(m, &mut c.train),
            Cmd::Search(a) => a.encode.apply(m, &mut c.train),
            Cmd::Locate(a) => a.locate.apply(m, &mut c.locate),
            Cmd::Generate(a) => a.decode.apply(m, &mut c.decode),
            Cmd::EvalGlobal(a) => {
                if given(m, "ks") {
                    c.eval.ks = a.ks.ks.clone();
                }
                let t = &mut c.train;
                merge!(m, a => t; max_query_len);
            }
            Cmd::EvalLocal(a) => {
                if given(m, "ks") {
                    c.eval.ks = a.ks.ks.clone();
                }
                a.locate.apply(m, &mut c.locate);
            }
            Cmd::EvalGen(a) => a.decode.apply(m, &mut c.decode),
            Cmd::Inspect(a) => a.locate.apply(m, &mut c.locate),
        }
    }
}
