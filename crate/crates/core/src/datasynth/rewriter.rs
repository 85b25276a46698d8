use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};
use crate::text::words;

const STOPWORDS_FILE: &str = include_str!("../../data/stopwords.txt");

/// Instruction sent ahead of the sentence to an external rewriter.
pub const REWRITE_PROMPT: &str = include_str!("../../data/rewrite_prompt.txt");

/// Environment variable holding the rewriter service bearer token.
pub const TOKEN_ENV: &str = "GEAR_REWRITER_TOKEN";

pub fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_FILE.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Sentence in, comma-separated keyword query out.
pub trait Rewriter: Sync {
    fn rewrite(&self, sentence: &str) -> Result<String>;
}

/// Content words in sentence order.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleRewriter;

impl Rewriter for RuleRewriter {
    fn rewrite(&self, sentence: &str) -> Result<String> {
        let stop = stopwords();
        Ok(words(sentence).into_iter().filter(|w| !stop.contains(w)).collect::<Vec<_>>().join(", "))
    }
}

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

/// Posts `{prompt}` as JSON to a completion endpoint and reads `{text}`.
/// A failed call is retried once.
pub struct ServiceRewriter {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl ServiceRewriter {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { url: url.into(), token, agent: ureq::Agent::new_with_config(config) }
    }

    /// Token taken from the environment.
    pub fn from_env(url: impl Into<String>, timeout: Duration) -> Self {
        Self::new(url, std::env::var(TOKEN_ENV).ok(), timeout)
    }

    pub fn prompt_for(sentence: &str) -> String {
        format!("{}\n{}", REWRITE_PROMPT.trim_end(), sentence)
    }

    fn call(&self, body: &str) -> Result<String> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| GearError::Rewrite(e.to_string()))?;
        let raw = resp.body_mut().read_to_string().map_err(|e| GearError::Rewrite(e.to_string()))?;
        let reply: Reply = serde_json::from_str(&raw).map_err(|e| GearError::Rewrite(format!("bad reply: {e}")))?;
        Ok(reply.text)
    }
}

impl Rewriter for ServiceRewriter {
    fn rewrite(&self, sentence: &str) -> Result<String> {
        let prompt = Self::prompt_for(sentence);
        let body = serde_json::to_string(&Request { prompt: &prompt }).expect("string fields serialize");
        self.call(&body).or_else(|_| self.call(&body))
    }
}
