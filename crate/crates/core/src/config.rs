//! Pipeline configuration: one JSON document, validated on load.
//! Secrets never live here, only the names of the environment
//! variables that hold them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generation::{hex, PromptTemplate, DEFAULT_TOKEN_BUDGET};
use crate::http::{Endpoint, RetryPolicy};
use crate::lexical::{Bm25Params, LexicalEngine};
use crate::retrieval::DEFAULT_RRF_K;

pub const DEFAULT_SEARCH_K: usize = 20;
pub const DEFAULT_RERANK_K: usize = 5;
pub const DEFAULT_NOT_FOUND: &str =
    "No relevant documents were found in the documentation for this question.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub lexical_k: usize,
    pub semantic_k: usize,
    pub rerank_k: usize,
    pub rrf_const: f64,
    pub lexical: LexicalConfig,
    pub embedding: EmbeddingConfig,
    pub rerank: RerankConfig,
    pub generator: GeneratorConfig,
    pub judge: JudgeConfig,
    pub template: PromptTemplate,
    pub token_budget: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Records evaluated concurrently by the benchmark runner.
    pub workers: usize,
    /// When false every stage timing is reported as 0, which makes
    /// responses and reports byte-reproducible.
    pub record_timings: bool,
    pub not_found_text: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            lexical_k: DEFAULT_SEARCH_K,
            semantic_k: DEFAULT_SEARCH_K,
            rerank_k: DEFAULT_RERANK_K,
            rrf_const: DEFAULT_RRF_K,
            lexical: LexicalConfig::default(),
            embedding: EmbeddingConfig::default(),
            rerank: RerankConfig::default(),
            generator: GeneratorConfig::default(),
            judge: JudgeConfig::default(),
            template: PromptTemplate::default(),
            token_budget: DEFAULT_TOKEN_BUDGET,
            retry: RetryPolicy::default(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            workers: 1,
            record_timings: true,
            not_found_text: DEFAULT_NOT_FOUND.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub chunks: Option<PathBuf>,
    /// Holds `lexical.json` and `vectors.bin`.
    pub index_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexicalConfig {
    pub engine: LexicalEngine,
    pub k1: f64,
    pub b: f64,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            engine: LexicalEngine::Bm25,
            k1: p.k1,
            b: p.b,
        }
    }
}

impl LexicalConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.k1,
            b: self.b,
        }
    }
}

/// An OpenAI-compatible service and the model to ask for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteService {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub model: String,
}

impl RemoteService {
    pub fn endpoint(&self) -> Endpoint {
        Endpoint {
            base_url: self.base_url.clone(),
            api_key_env: self.api_key_env.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Hash {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        service: RemoteService,
        dim: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

fn default_batch() -> usize {
    32
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash { dim: 256, seed: 0 }
    }
}

impl EmbeddingConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingConfig::Hash { dim, .. } | EmbeddingConfig::Remote { dim, .. } => *dim,
        }
    }
}

/// `backend` names the active reranker: `rrf`, `cosine`, `canned`
/// (needs `canned_path`) or `remote` (needs `remote`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub backend: String,
    pub fallback_to_rrf: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canned_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteService>,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            backend: "rrf".into(),
            fallback_to_rrf: true,
            canned_path: None,
            remote: None,
        }
    }
}

pub const RERANK_BACKENDS: [&str; 4] = ["rrf", "cosine", "canned", "remote"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorConfig {
    /// Fixture answers, see [`crate::generation::CannedClient`].
    Canned { path: Option<PathBuf> },
    Remote {
        service: RemoteService,
        #[serde(default)]
        temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_tokens: Option<u32>,
    },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Canned { path: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum JudgeConfig {
    #[default]
    None,
    Echo,
    Fixed {
        value: f64,
    },
    Remote {
        base_url: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        name: String,
    },
}

/// Per-request adjustments accepted by `run_query` and `/api/query`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexical_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rrf_const: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexical_engine: Option<LexicalEngine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<usize>,
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("config: {e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&bytes)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.paths.chunks);
        fix(&mut self.paths.index_dir);
        fix(&mut self.rerank.canned_path);
        if let GeneratorConfig::Canned { path } = &mut self.generator {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lexical_k", self.lexical_k),
            ("semantic_k", self.semantic_k),
            ("rerank_k", self.rerank_k),
            ("token_budget", self.token_budget),
            ("max_in_flight", self.max_in_flight),
            ("workers", self.workers),
            ("embedding.dim", self.embedding.dim()),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if !(self.rrf_const > 0.0 && self.rrf_const.is_finite()) {
            return Err(Error::Config("`rrf_const` must be positive".into()));
        }
        if !(self.lexical.k1 >= 0.0
            && self.lexical.k1.is_finite()
            && (0.0..=1.0).contains(&self.lexical.b))
        {
            return Err(Error::Config("BM25 needs k1 >= 0 and b in [0, 1]".into()));
        }
        if !RERANK_BACKENDS.contains(&self.rerank.backend.as_str()) {
            return Err(Error::Config(format!(
                "unknown rerank backend `{}` (expected one of {})",
                self.rerank.backend,
                RERANK_BACKENDS.join(", ")
            )));
        }
        if self.rerank.backend == "canned" && self.rerank.canned_path.is_none() {
            return Err(Error::Config(
                "rerank backend `canned` needs `rerank.canned_path`".into(),
            ));
        }
        if self.rerank.backend == "remote" && self.rerank.remote.is_none() {
            return Err(Error::Config(
                "rerank backend `remote` needs `rerank.remote`".into(),
            ));
        }
        if let Some(r) = &self.rerank.remote {
            r.endpoint().validate()?;
        }
        if let EmbeddingConfig::Remote {
            service,
            batch_size,
            ..
        } = &self.embedding
        {
            service.endpoint().validate()?;
            if *batch_size == 0 {
                return Err(Error::Config(
                    "`embedding.batch_size` must be at least 1".into(),
                ));
            }
        }
        if let GeneratorConfig::Remote {
            service,
            temperature,
            ..
        } = &self.generator
        {
            service.endpoint().validate()?;
            if !(0.0..=2.0).contains(temperature) {
                return Err(Error::Config(
                    "generator temperature must be in [0, 2]".into(),
                ));
            }
        }
        match &self.judge {
            JudgeConfig::Fixed { value } if !(0.0..=1.0).contains(value) => {
                return Err(Error::Config("fixed judge score must be in [0, 1]".into()));
            }
            JudgeConfig::Remote { base_url, .. } => Endpoint::new(base_url.clone()).validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Copy safe to show to clients: credentials embedded in URLs are masked.
    pub fn redacted(&self) -> Self {
        let mut c = self.clone();
        let mask = |s: &mut RemoteService| s.base_url = redact_url(&s.base_url);
        if let EmbeddingConfig::Remote { service, .. } = &mut c.embedding {
            mask(service);
        }
        if let Some(r) = &mut c.rerank.remote {
            mask(r);
        }
        if let GeneratorConfig::Remote { service, .. } = &mut c.generator {
            mask(service);
        }
        if let JudgeConfig::Remote { base_url, .. } = &mut c.judge {
            *base_url = redact_url(base_url);
        }
        c
    }

    pub fn with_overrides(&self, o: &QueryOverrides) -> Result<Self> {
        let mut c = self.clone();
        if let Some(v) = o.lexical_k {
            c.lexical_k = v;
        }
        if let Some(v) = o.semantic_k {
            c.semantic_k = v;
        }
        if let Some(v) = o.rerank_k {
            c.rerank_k = v;
        }
        if let Some(v) = o.rrf_const {
            c.rrf_const = v;
        }
        if let Some(v) = o.lexical_engine {
            c.lexical.engine = v;
        }
        if let Some(v) = &o.rerank_backend {
            c.rerank.backend = v.clone();
        }
        if let Some(v) = o.token_budget {
            c.token_budget = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn redact_url(url: &str) -> String {
    let (scheme, rest) = match url.split_once("://") {
        Some(x) => x,
        None => return url.to_string(),
    };
    let (authority, tail) = match rest.find(['/', '?', '#']) {
        Some(i) => rest.split_at(i),
        None => (rest, ""),
    };
    let host = match authority.rsplit_once('@') {
        Some((_, h)) => format!("***@{h}"),
        None => authority.to_string(),
    };
    let tail = match tail.split_once('?') {
        Some((p, _)) => format!("{p}?***"),
        None => tail.to_string(),
    };
    format!("{scheme}://{host}{tail}")
}
