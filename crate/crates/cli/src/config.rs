use std::path::{Path, PathBuf};

use gear_core::datasynth::FilterConfig;
use gear_core::generation::DecodeConfig;
use gear_core::model::ModelConfig;
use gear_core::retrieval::LocateConfig;
use gear_core::training::TrainConfig;
use gear_core::GearError;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Files shared between commands, so one config can drive a whole pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_size: ModelConfig::default().vocab_size, min_count: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RewriterKind {
    #[default]
    Rule,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceKind {
    #[default]
    Lexical,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rewriter: RewriterKind,
    pub service_url: Option<String>,
    pub timeout_secs: u64,
    pub relevance: RelevanceKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { rewriter: RewriterKind::Rule, service_url: None, timeout_secs: 30, relevance: RelevanceKind::Lexical }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}

/// Everything a command may read, merged from the config file and flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of the `train` and `filter` sections.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub synth: SynthConfig,
    pub decode: DecodeConfig,
    pub locate: LocateConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| GearError::io(path, e))?;
        toml::from_str(&text).map_err(|e| GearError::Config(format!("{}: {e}", path.display())).into())
    }

    /// Pushes the top-level seed down and checks every section.
    pub fn finish(mut self) -> Result<Self, CliError> {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.filter.seed = s;
        }
        if self.vocab.max_size < gear_core::text::NUM_SPECIALS + 1 {
            return Err(GearError::Config(format!("vocab max_size {} too small", self.vocab.max_size)).into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(GearError::Config("eval ks must be non-empty and at least 1".into()).into());
        }
        if let Some(l) = self.locate.layer {
            if !(1..=self.model.layers).contains(&l) {
                return Err(GearError::Config(format!("locate layer {l} outside 1..={}", self.model.layers)).into());
            }
        }
        // vocab_size is taken from the vocabulary file at train time
        ModelConfig { vocab_size: ModelConfig::default().vocab_size, ..self.model.clone() }.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        self.decode.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
