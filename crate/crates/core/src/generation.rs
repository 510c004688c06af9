//! QA prompt assembly and chat-completion clients.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::{Endpoint, RetryPolicy, Transport};
use crate::tokenize::count_tokens;

pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub documents_intro: String,
    /// Per-document header; `{index}` is 1-based, `{id}` is the chunk id.
    pub document_header: String,
    pub no_documents_marker: String,
    pub question_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_text: "You are an assistant for EDA tool documentation. Answer the user's question using only \
                          the reference documents provided. If the documents do not contain the information \
                          needed, reply that the question cannot be answered from the provided documentation."
                .into(),
            documents_intro: "Reference documents:".into(),
            document_header: "Document [{index}] ({id}):".into(),
            no_documents_marker: "No reference documents were provided.".into(),
            question_prefix: "Question: ".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PromptChunk<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    /// Stable key for fixture clients: the question for QA prompts, a
    /// task-specific key for dataset-generation prompts.
    pub lookup_key: String,
    pub included_chunk_ids: Vec<String>,
    pub dropped_chunk_ids: Vec<String>,
    pub token_estimate: usize,
}

impl RenderedPrompt {
    pub fn new(
        system: impl Into<String>,
        user: impl Into<String>,
        lookup_key: impl Into<String>,
    ) -> Self {
        let system = system.into();
        let user = user.into();
        let token_estimate = count_tokens(&system) + count_tokens(&user);
        Self {
            system,
            user,
            lookup_key: lookup_key.into(),
            included_chunk_ids: Vec::new(),
            dropped_chunk_ids: Vec::new(),
            token_estimate,
        }
    }

    /// Hex SHA-256 of the system and user messages.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn render_user(template: &PromptTemplate, question: &str, chunks: &[PromptChunk<'_>]) -> String {
    let mut user = String::new();
    if chunks.is_empty() {
        user.push_str(&template.no_documents_marker);
        user.push_str("\n\n");
    } else {
        user.push_str(&template.documents_intro);
        user.push_str("\n\n");
        for (i, c) in chunks.iter().enumerate() {
            let header = template
                .document_header
                .replace("{index}", &(i + 1).to_string())
                .replace("{id}", c.id);
            user.push_str(&header);
            user.push('\n');
            user.push_str(c.text);
            user.push_str("\n\n");
        }
    }
    user.push_str(&template.question_prefix);
    user.push_str(question);
    user
}

/// Renders the prompt with `chunks` in rank order. When `token_budget` is
/// exceeded the lowest-ranked chunks are dropped until it fits; if the
/// prompt does not fit even without documents, that is an error.
pub fn build_prompt(
    template: &PromptTemplate,
    question: &str,
    chunks: &[PromptChunk<'_>],
    token_budget: Option<usize>,
) -> Result<RenderedPrompt> {
    let mut keep = chunks.len();
    loop {
        let user = render_user(template, question, &chunks[..keep]);
        let mut p = RenderedPrompt::new(template.system_text.clone(), user, question);
        let fits = token_budget.is_none_or(|b| p.token_estimate <= b);
        if fits {
            p.included_chunk_ids = chunks[..keep].iter().map(|c| c.id.to_string()).collect();
            p.dropped_chunk_ids = chunks[keep..]
                .iter()
                .rev()
                .map(|c| c.id.to_string())
                .collect();
            return Ok(p);
        }
        if keep == 0 {
            return Err(Error::TokenBudget {
                budget: token_budget.unwrap_or(0),
                needed: p.token_estimate,
            });
        }
        keep -= 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub answer_text: String,
    pub model_name: String,
    pub prompt_token_count: usize,
    pub completion_token_count: usize,
    pub latency_ms: u64,
}

pub trait ChatClient: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &RenderedPrompt) -> Result<GenerationResult>;
}

/// Calls `client` and rejects empty completions.
pub fn generate_answer(
    client: &dyn ChatClient,
    prompt: &RenderedPrompt,
) -> Result<GenerationResult> {
    let r = client.complete(prompt)?;
    if r.answer_text.trim().is_empty() {
        return Err(Error::Generation(format!(
            "`{}` returned an empty completion",
            client.name()
        )));
    }
    Ok(r)
}

/// `POST {base}/v1/chat/completions`, temperature 0 by default.
pub struct OpenAiChatClient {
    pub endpoint: Endpoint,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub retry: RetryPolicy,
    transport: Arc<dyn Transport>,
}

impl OpenAiChatClient {
    pub fn new(
        endpoint: Endpoint,
        model: impl Into<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model: model.into(),
            temperature: 0.0,
            max_tokens: None,
            retry: RetryPolicy::default(),
            transport,
        }
    }

    fn request_body(&self, prompt: &RenderedPrompt) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": self.temperature,
        });
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = n.into();
        }
        body
    }
}

impl ChatClient for OpenAiChatClient {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<GenerationResult> {
        let body = self.request_body(prompt);
        let url = self.endpoint.url("/v1/chat/completions");
        let key = self.endpoint.api_key();
        let start = Instant::now();
        let resp = self
            .retry
            .run(|| self.transport.post_json(&url, &body, key.as_deref()))?;
        let latency_ms = start.elapsed().as_millis() as u64;
        let answer = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Generation("response has no choices[0].message.content".into()))?
            .to_string();
        let usage = |k: &str| {
            resp.pointer(&format!("/usage/{k}"))
                .and_then(Value::as_u64)
                .map(|n| n as usize)
        };
        Ok(GenerationResult {
            completion_token_count: usage("completion_tokens")
                .unwrap_or_else(|| count_tokens(&answer)),
            prompt_token_count: usage("prompt_tokens").unwrap_or(prompt.token_estimate),
            model_name: resp
                .get("model")
                .and_then(Value::as_str)
                .unwrap_or(&self.model)
                .to_string(),
            answer_text: answer,
            latency_ms,
        })
    }
}

/// Offline client answering from fixture tables: first by prompt hash,
/// then by lookup key, then the default answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CannedClient {
    #[serde(default = "canned_model")]
    pub model: String,
    #[serde(default)]
    pub by_prompt_hash: BTreeMap<String, String>,
    #[serde(default)]
    pub by_key: BTreeMap<String, String>,
    #[serde(default)]
    pub default: Option<String>,
}

fn canned_model() -> String {
    "canned".into()
}

impl CannedClient {
    pub fn from_answers<K: Into<String>, V: Into<String>>(
        answers: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            model: canned_model(),
            by_key: answers
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

impl ChatClient for CannedClient {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<GenerationResult> {
        let answer = self
            .by_prompt_hash
            .get(&prompt.hash())
            .or_else(|| self.by_key.get(&prompt.lookup_key))
            .or(self.default.as_ref())
            .ok_or_else(|| {
                Error::Generation(format!("no canned answer for `{}`", prompt.lookup_key))
            })?;
        Ok(GenerationResult {
            answer_text: answer.clone(),
            model_name: self.model.clone(),
            prompt_token_count: prompt.token_estimate,
            completion_token_count: count_tokens(answer),
            latency_ms: 0,
        })
    }
}
