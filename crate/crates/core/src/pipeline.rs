//! The query path: retrieve → fuse → rerank → generate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{
    EmbeddingConfig, GeneratorConfig, JudgeConfig, PipelineConfig, QueryOverrides,
};
use crate::corpus::{load_chunks, Chunk};
use crate::error::{Error, Result};
use crate::generation::{
    build_prompt, generate_answer, CannedClient, ChatClient, OpenAiChatClient, PromptChunk,
};
use crate::http::{Endpoint, HttpTransport, Transport};
use crate::lexical::InvertedIndex;
use crate::metrics::{ConsistencyJudge, EchoJudge, FixedJudge, RemoteJudge};
use crate::retrieval::{
    rerank, rrf_fuse, CannedRerank, EmbeddingCosine, RankedCandidate, RemoteCrossEncoder,
    RerankBackend, RerankInput, Retriever, RrfPassthrough,
};
use crate::vector::{EmbeddingProvider, HashEmbedder, RemoteEmbedder, VectorStore};

pub const LEXICAL_INDEX_FILE: &str = "lexical.json";
pub const VECTOR_STORE_FILE: &str = "vectors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieve,
    Fuse,
    Rerank,
    Generate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Retrieve => "retrieve",
            Stage::Fuse => "fuse",
            Stage::Rerank => "rerank",
            Stage::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub code: String,
    pub message: String,
    pub stage: Stage,
}

impl StageError {
    fn new(stage: Stage, e: &Error) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
            stage,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieve_ms: f64,
    pub fuse_ms: f64,
    pub rerank_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub const STAGES: [&'static str; 5] = ["retrieve", "fuse", "rerank", "generate", "total"];

    pub fn get(&self, stage: &str) -> Option<f64> {
        Some(match stage {
            "retrieve" => self.retrieve_ms,
            "fuse" => self.fuse_ms,
            "rerank" => self.rerank_ms,
            "generate" => self.generate_ms,
            "total" => self.total_ms,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Answered,
    NotFound,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    /// 1-based position in the final order.
    pub rank: usize,
    #[serde(flatten)]
    pub candidate: RankedCandidate,
    pub source_path: String,
    pub heading_path: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub model: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub included_chunk_ids: Vec<String>,
    pub dropped_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub question: String,
    pub status: QueryStatus,
    pub answer: Option<String>,
    pub candidates: Vec<CandidateView>,
    /// Size of the deduplicated lexical + semantic pool.
    pub pool_size: usize,
    pub reranker: String,
    pub generation: Option<GenerationInfo>,
    pub timings: StageTimings,
    pub config_hash: String,
    pub warnings: Vec<String>,
    pub error: Option<StageError>,
}

/// Everything a query needs, immutable once built and shareable across
/// threads.
pub struct Pipeline {
    config: PipelineConfig,
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
    index: InvertedIndex,
    store: VectorStore,
    embedder: Arc<dyn EmbeddingProvider>,
    rerankers: BTreeMap<String, Arc<dyn RerankBackend>>,
    generator: Arc<dyn ChatClient>,
    judge: Option<Arc<dyn ConsistencyJudge>>,
}

/// Assembles a [`Pipeline`]; any component not supplied is built from the config.
pub struct PipelineBuilder {
    config: PipelineConfig,
    chunks: Vec<Chunk>,
    transport: Option<Arc<dyn Transport>>,
    index: Option<InvertedIndex>,
    store: Option<VectorStore>,
    embedder: Option<Arc<dyn EmbeddingProvider>>,
    rerankers: BTreeMap<String, Arc<dyn RerankBackend>>,
    generator: Option<Arc<dyn ChatClient>>,
    judge: Option<Option<Arc<dyn ConsistencyJudge>>>,
}

impl PipelineBuilder {
    pub fn transport(mut self, t: Arc<dyn Transport>) -> Self {
        self.transport = Some(t);
        self
    }

    pub fn index(mut self, index: InvertedIndex) -> Self {
        self.index = Some(index);
        self
    }

    pub fn store(mut self, store: VectorStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn embedder(mut self, e: Arc<dyn EmbeddingProvider>) -> Self {
        self.embedder = Some(e);
        self
    }

    /// Registers (or replaces) a reranker under `name`.
    pub fn reranker(mut self, name: impl Into<String>, r: Arc<dyn RerankBackend>) -> Self {
        self.rerankers.insert(name.into(), r);
        self
    }

    pub fn generator(mut self, g: Arc<dyn ChatClient>) -> Self {
        self.generator = Some(g);
        self
    }

    pub fn judge(mut self, j: Option<Arc<dyn ConsistencyJudge>>) -> Self {
        self.judge = Some(j);
        self
    }

    pub fn build(self) -> Result<Pipeline> {
        let cfg = self.config;
        cfg.validate()?;
        let transport = self
            .transport
            .unwrap_or_else(|| Arc::new(HttpTransport::new(Duration::from_millis(cfg.timeout_ms))));

        let mut by_id = HashMap::with_capacity(self.chunks.len());
        for (i, c) in self.chunks.iter().enumerate() {
            if by_id.insert(c.id.clone(), i).is_some() {
                return Err(Error::DuplicateChunk(c.id.clone()));
            }
        }

        let embedder = match self.embedder {
            Some(e) => e,
            None => embedder_from_config(&cfg, transport.clone())?,
        };
        let index = match self.index {
            Some(i) => i,
            None => InvertedIndex::build(&self.chunks)?,
        };
        let store = match self.store {
            Some(s) => s,
            None => VectorStore::embed_chunks(
                embedder.as_ref(),
                self.chunks.iter().map(|c| (c.id.as_str(), c.text.as_str())),
            )?,
        };
        if !store.is_empty() && store.dim() != embedder.dim() {
            return Err(Error::Config(format!(
                "vector store has dimension {} but the embedder produces {}",
                store.dim(),
                embedder.dim()
            )));
        }
        check_same_ids(&by_id, index.doc_count(), store.ids())?;

        let mut rerankers = self.rerankers;
        rerankers
            .entry("rrf".into())
            .or_insert_with(|| Arc::new(RrfPassthrough));
        rerankers
            .entry("cosine".into())
            .or_insert_with(|| Arc::new(EmbeddingCosine::new(embedder.clone())));
        if let Some(p) = &cfg.rerank.canned_path {
            if !rerankers.contains_key("canned") {
                rerankers.insert("canned".into(), Arc::new(load_json::<CannedRerank>(p)?));
            }
        }
        if let Some(r) = &cfg.rerank.remote {
            if !rerankers.contains_key("remote") {
                let mut ce =
                    RemoteCrossEncoder::new(r.endpoint(), r.model.clone(), transport.clone());
                ce.max_in_flight = cfg.max_in_flight;
                ce.retry = cfg.retry;
                rerankers.insert("remote".into(), Arc::new(ce));
            }
        }
        if !rerankers.contains_key(&cfg.rerank.backend) {
            return Err(Error::Config(format!(
                "rerank backend `{}` is not available",
                cfg.rerank.backend
            )));
        }

        let generator = match self.generator {
            Some(g) => g,
            None => generator_from_config(&cfg, transport.clone())?,
        };
        let judge = match self.judge {
            Some(j) => j,
            None => judge_from_config(&cfg, transport),
        };

        Ok(Pipeline {
            config: cfg,
            chunks: self.chunks,
            by_id,
            index,
            store,
            embedder,
            rerankers,
            generator,
            judge,
        })
    }
}

fn check_same_ids(by_id: &HashMap<String, usize>, indexed: usize, stored: &[String]) -> Result<()> {
    if indexed != by_id.len() {
        return Err(Error::Config(format!(
            "lexical index covers {indexed} chunks but the chunk store has {}",
            by_id.len()
        )));
    }
    if stored.len() != by_id.len() || stored.iter().any(|id| !by_id.contains_key(id)) {
        return Err(Error::Config(
            "vector store ids do not match the chunk store".into(),
        ));
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

pub fn embedder_from_config(
    cfg: &PipelineConfig,
    transport: Arc<dyn Transport>,
) -> Result<Arc<dyn EmbeddingProvider>> {
    Ok(match &cfg.embedding {
        EmbeddingConfig::Hash { dim, seed } => Arc::new(HashEmbedder::new(*dim, *seed)?),
        EmbeddingConfig::Remote {
            service,
            dim,
            batch_size,
        } => {
            let mut e =
                RemoteEmbedder::new(service.endpoint(), service.model.clone(), *dim, transport);
            e.batch_size = *batch_size;
            e.max_in_flight = cfg.max_in_flight;
            e.retry = cfg.retry;
            Arc::new(e)
        }
    })
}

pub fn generator_from_config(
    cfg: &PipelineConfig,
    transport: Arc<dyn Transport>,
) -> Result<Arc<dyn ChatClient>> {
    Ok(match &cfg.generator {
        GeneratorConfig::Canned { path: Some(p) } => Arc::new(CannedClient::load(p)?),
        GeneratorConfig::Canned { path: None } => Arc::new(CannedClient::default()),
        GeneratorConfig::Remote {
            service,
            temperature,
            max_tokens,
        } => {
            let mut c = OpenAiChatClient::new(service.endpoint(), service.model.clone(), transport);
            c.temperature = *temperature;
            c.max_tokens = *max_tokens;
            c.retry = cfg.retry;
            Arc::new(c)
        }
    })
}

pub fn judge_from_config(
    cfg: &PipelineConfig,
    transport: Arc<dyn Transport>,
) -> Option<Arc<dyn ConsistencyJudge>> {
    match &cfg.judge {
        JudgeConfig::None => None,
        JudgeConfig::Echo => Some(Arc::new(EchoJudge)),
        JudgeConfig::Fixed { value } => Some(Arc::new(FixedJudge(*value))),
        JudgeConfig::Remote {
            base_url,
            api_key_env,
            name,
        } => {
            let endpoint = Endpoint {
                base_url: base_url.clone(),
                api_key_env: api_key_env.clone(),
            };
            let mut j = RemoteJudge::new(endpoint, name.clone(), transport);
            j.retry = cfg.retry;
            Some(Arc::new(j))
        }
    }
}

struct Clock {
    enabled: bool,
}

impl Clock {
    fn time<T>(&self, slot: &mut f64, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if self.enabled {
            *slot = start.elapsed().as_secs_f64() * 1000.0;
        }
        out
    }
}

/// Retrieval output before generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    /// Full fused pool in RRF order.
    pub fused: Vec<RankedCandidate>,
    /// Top `rerank_k` after reranking (or the RRF fallback).
    pub reranked: Vec<RankedCandidate>,
    pub warnings: Vec<String>,
}

impl Pipeline {
    pub fn builder(config: PipelineConfig, chunks: Vec<Chunk>) -> PipelineBuilder {
        PipelineBuilder {
            config,
            chunks,
            transport: None,
            index: None,
            store: None,
            embedder: None,
            rerankers: BTreeMap::new(),
            generator: None,
            judge: None,
        }
    }

    /// Loads the chunk store and any persisted indexes named by `config.paths`.
    /// Indexes missing from `index_dir` are built in memory.
    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        let chunks_path = config
            .paths
            .chunks
            .clone()
            .ok_or_else(|| Error::Config("`paths.chunks` is not set".into()))?;
        let chunks = load_chunks(&chunks_path)?;
        let mut b = Self::builder(config.clone(), chunks);
        if let Some(dir) = &config.paths.index_dir {
            let lex = dir.join(LEXICAL_INDEX_FILE);
            if lex.exists() {
                b = b.index(InvertedIndex::load(&lex)?);
            }
            let vec = dir.join(VECTOR_STORE_FILE);
            if vec.exists() {
                b = b.store(VectorStore::load(&vec)?);
            }
        }
        b.build()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.embedder
    }

    pub fn reranker_names(&self) -> Vec<String> {
        self.rerankers.keys().cloned().collect()
    }

    pub fn reranker(&self, name: &str) -> Result<&Arc<dyn RerankBackend>> {
        self.rerankers
            .get(name)
            .ok_or_else(|| Error::Config(format!("rerank backend `{name}` is not available")))
    }

    pub fn generator(&self) -> &Arc<dyn ChatClient> {
        &self.generator
    }

    pub fn judge(&self) -> Option<&Arc<dyn ConsistencyJudge>> {
        self.judge.as_ref()
    }

    pub fn retriever(&self, cfg: &PipelineConfig) -> Retriever<'_> {
        Retriever {
            index: &self.index,
            store: &self.store,
            embedder: self.embedder.as_ref(),
            engine: cfg.lexical.engine,
            bm25: cfg.lexical.bm25(),
        }
    }

    fn text_of(&self, id: &str) -> &str {
        self.chunk(id).map(|c| c.text.as_str()).unwrap_or("")
    }

    /// Hybrid pool in RRF order.
    pub fn fused_pool(&self, question: &str, cfg: &PipelineConfig) -> Result<Vec<RankedCandidate>> {
        let pool =
            self.retriever(cfg)
                .hybrid(question, cfg.lexical_k, cfg.semantic_k, cfg.rrf_const)?;
        rrf_fuse(pool, cfg.rrf_const)
    }

    /// Reranks `pool` with the named backend, keeping `top_k`.
    pub fn rerank_with(
        &self,
        backend: &str,
        question: &str,
        pool: &[RankedCandidate],
        top_k: usize,
        fallback_to_rrf: bool,
    ) -> Result<crate::retrieval::RerankOutcome> {
        let backend = self.reranker(backend)?;
        let inputs: Vec<RerankInput<'_>> = pool
            .iter()
            .map(|c| RerankInput {
                candidate: c,
                text: self.text_of(&c.chunk_id),
            })
            .collect();
        rerank(backend.as_ref(), question, &inputs, top_k, fallback_to_rrf)
    }

    fn view(&self, rank: usize, c: RankedCandidate) -> CandidateView {
        let chunk = self.chunk(&c.chunk_id);
        CandidateView {
            rank,
            source_path: chunk.map(|c| c.source_path.clone()).unwrap_or_default(),
            heading_path: chunk.map(|c| c.heading_path.clone()).unwrap_or_default(),
            text: chunk.map(|c| c.text.clone()).unwrap_or_default(),
            candidate: c,
        }
    }

    fn views(&self, cands: Vec<RankedCandidate>) -> Vec<CandidateView> {
        cands
            .into_iter()
            .enumerate()
            .map(|(i, c)| self.view(i + 1, c))
            .collect()
    }

    /// Runs the whole pipeline. `Err` is reserved for invalid requests;
    /// stage failures come back inside the response, with whatever
    /// earlier stages produced.
    pub fn run_query(&self, question: &str, overrides: &QueryOverrides) -> Result<QueryResponse> {
        if question.trim().is_empty() {
            return Err(Error::Invalid("question is empty".into()));
        }
        let cfg = self.config.with_overrides(overrides)?;
        self.reranker(&cfg.rerank.backend)?;
        let clock = Clock {
            enabled: cfg.record_timings,
        };
        let started = Instant::now();
        let mut t = StageTimings::default();
        let mut resp = QueryResponse {
            question: question.to_string(),
            status: QueryStatus::Failed,
            answer: None,
            candidates: Vec::new(),
            pool_size: 0,
            reranker: cfg.rerank.backend.clone(),
            generation: None,
            timings: t,
            config_hash: cfg.hash(),
            warnings: Vec::new(),
            error: None,
        };
        let finish = |mut resp: QueryResponse, mut t: StageTimings| {
            if clock.enabled {
                t.total_ms = started.elapsed().as_secs_f64() * 1000.0;
            }
            resp.timings = t;
            resp
        };

        let retriever = self.retriever(&cfg);
        let hits = clock.time(&mut t.retrieve_ms, || -> Result<_> {
            let lex = retriever.lexical(question, cfg.lexical_k);
            let sem = retriever.semantic(question, cfg.semantic_k)?;
            Ok((lex, sem))
        });
        let (lex, sem) = match hits {
            Ok(x) => x,
            Err(e) => {
                resp.error = Some(StageError::new(Stage::Retrieve, &e));
                return Ok(finish(resp, t));
            }
        };
        if lex.is_empty() {
            resp.warnings
                .push("no lexical evidence for the question".into());
        }

        let fused = clock.time(&mut t.fuse_ms, || {
            rrf_fuse(
                crate::retrieval::merge_pool(&lex, &sem, cfg.rrf_const),
                cfg.rrf_const,
            )
        });
        let fused = match fused {
            Ok(f) => f,
            Err(e) => {
                resp.error = Some(StageError::new(Stage::Fuse, &e));
                return Ok(finish(resp, t));
            }
        };
        resp.pool_size = fused.len();
        if fused.is_empty() {
            resp.status = QueryStatus::NotFound;
            resp.answer = Some(cfg.not_found_text.clone());
            return Ok(finish(resp, t));
        }

        let outcome = clock.time(&mut t.rerank_ms, || {
            self.rerank_with(
                &cfg.rerank.backend,
                question,
                &fused,
                cfg.rerank_k,
                cfg.rerank.fallback_to_rrf,
            )
        });
        let top = match outcome {
            Ok(o) => {
                resp.warnings.extend(o.warnings);
                o.candidates
            }
            Err(e) => {
                resp.error = Some(StageError::new(Stage::Rerank, &e));
                resp.warnings
                    .push("reranking failed; candidates are shown in RRF order".into());
                resp.candidates = self.views(fused.into_iter().take(cfg.rerank_k).collect());
                return Ok(finish(resp, t));
            }
        };

        let generated = clock.time(&mut t.generate_ms, || -> Result<_> {
            let chunks: Vec<PromptChunk<'_>> = top
                .iter()
                .map(|c| PromptChunk {
                    id: &c.chunk_id,
                    text: self.text_of(&c.chunk_id),
                })
                .collect();
            let prompt = build_prompt(&cfg.template, question, &chunks, Some(cfg.token_budget))?;
            let out = generate_answer(self.generator.as_ref(), &prompt)?;
            Ok((prompt, out))
        });
        resp.candidates = self.views(top);
        match generated {
            Ok((prompt, out)) => {
                if !prompt.dropped_chunk_ids.is_empty() {
                    resp.warnings.push(format!(
                        "token budget {} exceeded; dropped {}",
                        cfg.token_budget,
                        prompt.dropped_chunk_ids.join(", ")
                    ));
                }
                resp.status = QueryStatus::Answered;
                resp.answer = Some(out.answer_text);
                resp.generation = Some(GenerationInfo {
                    model: out.model_name,
                    prompt_tokens: out.prompt_token_count,
                    completion_tokens: out.completion_token_count,
                    included_chunk_ids: prompt.included_chunk_ids,
                    dropped_chunk_ids: prompt.dropped_chunk_ids,
                });
            }
            Err(e) => resp.error = Some(StageError::new(Stage::Generate, &e)),
        }
        Ok(finish(resp, t))
    }

    /// Writes the lexical index and vector store into `dir`.
    pub fn save_indexes(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.index.save(&dir.join(LEXICAL_INDEX_FILE))?;
        self.store.save(&dir.join(VECTOR_STORE_FILE))
    }
}
