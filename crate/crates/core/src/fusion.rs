//! LLM rationale consultation and fusion with the model's own top tokens.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{Sample, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::IndexSet;

/// Union of the model's and the LLM's token sets.
pub fn fuse(e_x: &IndexSet, e_llm: &IndexSet) -> IndexSet {
    e_x.union(e_llm).copied().collect()
}

/// Jaccard overlap of the two sets; 1.0 when both are empty.
pub fn agreement(e_x: &IndexSet, e_llm: &IndexSet) -> f64 {
    let union = e_x.union(e_llm).count();
    if union == 0 {
        return 1.0;
    }
    e_x.intersection(e_llm).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSets {
    pub e_x: IndexSet,
    pub e_llm: IndexSet,
    pub e_final: IndexSet,
    pub agreement: f64,
}

impl ExplanationSets {
    pub fn new(e_x: IndexSet, e_llm: IndexSet) -> Self {
        ExplanationSets {
            e_final: fuse(&e_x, &e_llm),
            agreement: agreement(&e_x, &e_llm),
            e_x,
            e_llm,
        }
    }
}

pub const DEFAULT_LLM_MODEL: &str = "llama-3.1";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "hateful-words-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub prompt_template: String,
    pub fixture: Option<PathBuf>,
    /// Bearer token; read from the environment, never from config files.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: None,
            model: DEFAULT_LLM_MODEL.to_string(),
            timeout_secs: 30,
            max_retries: 3,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            fixture: None,
            api_key: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_template != DEFAULT_PROMPT_TEMPLATE {
            return Err(Error::arg(format!(
                "unknown prompt template {:?}",
                self.prompt_template
            )));
        }
        match (&self.endpoint, &self.fixture) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::arg(
                "exactly one of llm endpoint and llm fixture must be configured",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmRationaleResponse {
    pub raw: Vec<String>,
    pub resolved: IndexSet,
    pub unresolved: Vec<String>,
}

fn fold(s: &str) -> String {
    s.nfc().collect::<String>().to_lowercase()
}

/// Maps each word to every token position whose NFC, lower-cased surface
/// equals the word's.
pub fn resolve_words(words: &[String], seq: &TokenSequence) -> (IndexSet, Vec<String>) {
    let folded: Vec<String> = seq.surfaces().map(fold).collect();
    let mut resolved = IndexSet::new();
    let mut unresolved = Vec::new();
    for w in words {
        let key = fold(w.trim());
        let mut matched = false;
        for (i, t) in folded.iter().enumerate() {
            if *t == key {
                resolved.insert(i);
                matched = true;
            }
        }
        if !matched {
            unresolved.push(w.clone());
        }
    }
    (resolved, unresolved)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// System and user messages for a prompt template.
pub fn render_prompt(template: &str, sample: &Sample) -> Result<Vec<ChatMessage>> {
    match template {
        DEFAULT_PROMPT_TEMPLATE => Ok(vec![
            ChatMessage {
                role: "system".into(),
                content: "You annotate social-media posts for hate speech. Answer with a JSON array of \
                          strings and nothing else."
                    .into(),
            },
            ChatMessage {
                role: "user".into(),
                content: format!(
                    "List the words of the following text that make it hateful, copied exactly as they \
                     appear. Return them as a JSON array of strings. Return [] if the text is not \
                     hateful.\n\nText: {}",
                    sample.tokens.join()
                ),
            },
        ]),
        other => Err(Error::arg(format!("unknown prompt template {other:?}"))),
    }
}

/// Extracts a JSON string array from model output, tolerating text around it.
pub fn parse_word_array(content: &str) -> Option<Vec<String>> {
    if let Ok(words) = serde_json::from_str::<Vec<String>>(content.trim()) {
        return Some(words);
    }
    let start = content.find('[')?;
    let end = content.rfind(']')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Vec<String>>(&content[start..=end]).ok()
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: u8,
}

fn reply_content(body: &serde_json::Value) -> Option<&str> {
    body.pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/message/content"))
        .and_then(|v| v.as_str())
}

/// Where LLM rationales come from.
#[derive(Debug)]
pub enum LlmClient {
    /// Sample id to word list, read from a JSON file.
    Fixture(HashMap<String, Vec<String>>),
    Http {
        config: LlmClientConfig,
        agent: ureq::Agent,
    },
}

impl LlmClient {
    pub fn from_config(config: &LlmClientConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.fixture {
            return Self::load_fixture(path);
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build();
        Ok(LlmClient::Http {
            config: config.clone(),
            agent,
        })
    }

    pub fn load_fixture(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(LlmClient::Fixture(serde_json::from_str(&text)?))
    }

    pub fn fixture(map: HashMap<String, Vec<String>>) -> Self {
        LlmClient::Fixture(map)
    }

    /// The raw word list for a sample. Missing fixture ids and unparseable
    /// replies yield an empty list with a warning.
    pub fn words(&self, sample: &Sample) -> Result<Vec<String>> {
        match self {
            LlmClient::Fixture(map) => Ok(map.get(&sample.id).cloned().unwrap_or_else(|| {
                log::warn!("llm fixture has no entry for sample {}", sample.id);
                Vec::new()
            })),
            LlmClient::Http { config, agent } => {
                let content = request_with_retries(config, agent, sample)?;
                Ok(parse_word_array(&content).unwrap_or_else(|| {
                    log::warn!("unparseable llm reply for sample {}: {content:?}", sample.id);
                    Vec::new()
                }))
            }
        }
    }

    pub fn consult(&self, sample: &Sample) -> Result<LlmRationaleResponse> {
        let raw = self.words(sample)?;
        let (resolved, unresolved) = resolve_words(&raw, &sample.tokens);
        Ok(LlmRationaleResponse {
            raw,
            resolved,
            unresolved,
        })
    }
}

fn request_with_retries(config: &LlmClientConfig, agent: &ureq::Agent, sample: &Sample) -> Result<String> {
    let url = config
        .endpoint
        .as_deref()
        .ok_or_else(|| Error::arg("no llm endpoint configured"))?;
    let messages = render_prompt(&config.prompt_template, sample)?;
    let body = ChatRequest {
        model: &config.model,
        messages: &messages,
        temperature: 0,
    };
    let mut last_error = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 << (attempt - 1).min(6)));
        }
        let mut req = agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = &config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(resp) => {
                let value: serde_json::Value = match resp.into_json() {
                    Ok(v) => v,
                    Err(e) => {
                        log::warn!("llm reply for sample {} is not JSON: {e}", sample.id);
                        return Ok(String::new());
                    }
                };
                return Ok(reply_content(&value).unwrap_or_default().to_string());
            }
            Err(ureq::Error::Status(code, _)) if code < 500 && code != 429 => {
                return Err(Error::Transport(format!("{url} returned HTTP {code}")));
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(Error::Transport(format!(
        "{url} failed after {} attempts: {last_error}",
        config.max_retries + 1
    )))
}
