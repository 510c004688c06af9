//! Hybrid lexical + semantic retrieval, reciprocal rank fusion and reranking.
//!
//! A candidate absent from one ranking gets no contribution from it:
//! `rrf(d) = sum over rankings containing d of 1 / (k + rank)`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{Endpoint, RetryPolicy, Transport};
use crate::lexical::{Bm25Params, InvertedIndex, LexicalEngine, LexicalHit};
use crate::vector::{cosine, embed_batch, EmbeddingProvider, SemanticHit, VectorStore};

pub const DEFAULT_RRF_K: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub chunk_id: String,
    pub lexical_rank: Option<usize>,
    pub semantic_rank: Option<usize>,
    pub lexical_score: Option<f64>,
    pub semantic_score: Option<f64>,
    pub rrf_score: f64,
    pub rerank_score: Option<f64>,
}

impl RankedCandidate {
    fn ranks(&self) -> impl Iterator<Item = usize> {
        self.lexical_rank.into_iter().chain(self.semantic_rank)
    }
}

pub fn rrf_contribution(k_const: f64, rank: usize) -> f64 {
    1.0 / (k_const + rank as f64)
}

/// Union of both hit lists keyed by chunk id, sorted by id. Each
/// candidate keeps the ranks and scores it earned and its RRF score.
pub fn merge_pool(
    lexical: &[LexicalHit],
    semantic: &[SemanticHit],
    k_const: f64,
) -> Vec<RankedCandidate> {
    let mut pool: BTreeMap<&str, RankedCandidate> = BTreeMap::new();
    let blank = |id: &str| RankedCandidate {
        chunk_id: id.to_string(),
        lexical_rank: None,
        semantic_rank: None,
        lexical_score: None,
        semantic_score: None,
        rrf_score: 0.0,
        rerank_score: None,
    };
    for h in lexical {
        let c = pool
            .entry(&h.chunk_id)
            .or_insert_with(|| blank(&h.chunk_id));
        if c.lexical_rank.is_none() {
            c.lexical_rank = Some(h.rank);
            c.lexical_score = Some(h.score);
        }
    }
    for h in semantic {
        let c = pool
            .entry(&h.chunk_id)
            .or_insert_with(|| blank(&h.chunk_id));
        if c.semantic_rank.is_none() {
            c.semantic_rank = Some(h.rank);
            c.semantic_score = Some(h.score);
        }
    }
    pool.into_values()
        .map(|mut c| {
            c.rrf_score = c.ranks().map(|r| rrf_contribution(k_const, r)).sum();
            c
        })
        .collect()
}

fn by_score_then_id(
    score: impl Fn(&RankedCandidate) -> f64,
) -> impl Fn(&RankedCandidate, &RankedCandidate) -> std::cmp::Ordering {
    move |a, b| {
        score(b)
            .total_cmp(&score(a))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    }
}

/// Recomputes every RRF score with `k_const` and sorts descending, ties by id.
pub fn rrf_fuse(
    mut candidates: Vec<RankedCandidate>,
    k_const: f64,
) -> Result<Vec<RankedCandidate>> {
    if !(k_const > 0.0 && k_const.is_finite()) {
        return Err(Error::Invalid(format!(
            "rrf constant must be positive, got {k_const}"
        )));
    }
    for c in &mut candidates {
        c.rrf_score = c.ranks().map(|r| rrf_contribution(k_const, r)).sum();
    }
    candidates.sort_by(by_score_then_id(|c| c.rrf_score));
    Ok(candidates)
}

/// Scores (query, chunk) pairs; higher means more relevant.
pub trait RerankBackend: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, query: &str, pool: &[RerankInput<'_>]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct RerankInput<'a> {
    pub candidate: &'a RankedCandidate,
    pub text: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub candidates: Vec<RankedCandidate>,
    /// The backend failed and the fused RRF order was used instead.
    pub fell_back: bool,
    pub warnings: Vec<String>,
}

/// Scores the whole pool with `backend` and keeps the `top_k` best,
/// descending, ties by id. With `fallback_to_rrf`, a transport failure
/// yields the RRF order flagged with a warning.
pub fn rerank(
    backend: &dyn RerankBackend,
    query: &str,
    pool: &[RerankInput<'_>],
    top_k: usize,
    fallback_to_rrf: bool,
) -> Result<RerankOutcome> {
    if top_k == 0 {
        return Err(Error::Invalid("rerank top_k must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Invalid(
            "rerank needs a non-empty candidate pool".into(),
        ));
    }
    let scores = match backend.score(query, pool) {
        Ok(s) => s,
        Err(e @ Error::Transport { .. }) if fallback_to_rrf => {
            let mut fused: Vec<RankedCandidate> =
                pool.iter().map(|p| p.candidate.clone()).collect();
            fused.sort_by(by_score_then_id(|c| c.rrf_score));
            fused.truncate(top_k);
            return Ok(RerankOutcome {
                candidates: fused,
                fell_back: true,
                warnings: vec![format!(
                    "reranker `{}` unavailable, using RRF order: {e}",
                    backend.name()
                )],
            });
        }
        Err(e) => return Err(e),
    };
    if scores.len() != pool.len() {
        return Err(Error::ProviderContract(format!(
            "reranker `{}` returned {} scores for {} candidates",
            backend.name(),
            scores.len(),
            pool.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::ProviderContract(format!(
            "reranker `{}` returned a non-finite score",
            backend.name()
        )));
    }
    let mut out: Vec<RankedCandidate> = pool
        .iter()
        .zip(scores)
        .map(|(p, s)| RankedCandidate {
            rerank_score: Some(s),
            ..p.candidate.clone()
        })
        .collect();
    out.sort_by(by_score_then_id(|c| {
        c.rerank_score.unwrap_or(f64::NEG_INFINITY)
    }));
    out.truncate(top_k);
    Ok(RerankOutcome {
        candidates: out,
        fell_back: false,
        warnings: Vec::new(),
    })
}

/// Baseline backend: the rerank score is the RRF score.
#[derive(Debug, Default, Clone)]
pub struct RrfPassthrough;

impl RerankBackend for RrfPassthrough {
    fn name(&self) -> &str {
        "rrf"
    }

    fn score(&self, _query: &str, pool: &[RerankInput<'_>]) -> Result<Vec<f64>> {
        Ok(pool.iter().map(|p| p.candidate.rrf_score).collect())
    }
}

/// Cosine between the query embedding and each chunk's embedding.
pub struct EmbeddingCosine {
    provider: Arc<dyn EmbeddingProvider>,
}

impl EmbeddingCosine {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self { provider }
    }
}

impl RerankBackend for EmbeddingCosine {
    fn name(&self) -> &str {
        "cosine"
    }

    fn score(&self, query: &str, pool: &[RerankInput<'_>]) -> Result<Vec<f64>> {
        let mut texts = Vec::with_capacity(pool.len() + 1);
        texts.push(query.to_string());
        texts.extend(pool.iter().map(|p| p.text.to_string()));
        let vecs = embed_batch(self.provider.as_ref(), &texts)?;
        let q = vecs[0].as_slice();
        Ok(vecs[1..].iter().map(|v| cosine(q, v.as_slice())).collect())
    }
}

/// Fixed scores per query and chunk id, read from a fixture.
/// Unknown pairs score `default_score`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CannedRerank {
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub default_score: f64,
}

impl RerankBackend for CannedRerank {
    fn name(&self) -> &str {
        "canned"
    }

    fn score(&self, query: &str, pool: &[RerankInput<'_>]) -> Result<Vec<f64>> {
        let table = self.scores.get(query);
        Ok(pool
            .iter()
            .map(|p| {
                table
                    .and_then(|t| t.get(&p.candidate.chunk_id))
                    .copied()
                    .unwrap_or(self.default_score)
            })
            .collect())
    }
}

/// Cross-encoder scoring service: `POST {base}/v1/rerank`.
pub struct RemoteCrossEncoder {
    pub endpoint: Endpoint,
    pub model: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    transport: Arc<dyn Transport>,
}

impl RemoteCrossEncoder {
    pub fn new(
        endpoint: Endpoint,
        model: impl Into<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model: model.into(),
            batch_size: 64,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            transport,
        }
    }

    fn score_batch(&self, query: &str, docs: &[&str]) -> Result<Vec<f64>> {
        let body = json!({
            "model": self.model,
            "query": query,
            "documents": docs,
            "top_n": docs.len(),
        });
        let url = self.endpoint.url("/v1/rerank");
        let key = self.endpoint.api_key();
        let resp = self
            .retry
            .run(|| self.transport.post_json(&url, &body, key.as_deref()))?;
        parse_rerank_response(&resp, docs.len())
    }
}

/// Scores from `results[].{index, relevance_score}`, one per document.
pub fn parse_rerank_response(resp: &Value, expected: usize) -> Result<Vec<f64>> {
    let results = resp
        .get("results")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::ProviderContract("rerank response has no `results` array".into()))?;
    let mut scores: Vec<Option<f64>> = vec![None; expected];
    for r in results {
        let index = r.get("index").and_then(Value::as_u64).ok_or_else(|| {
            Error::ProviderContract("rerank result without integer `index`".into())
        })? as usize;
        let score = r
            .get("relevance_score")
            .and_then(Value::as_f64)
            .ok_or_else(|| {
                Error::ProviderContract("rerank result without numeric `relevance_score`".into())
            })?;
        match scores.get_mut(index) {
            Some(slot @ None) => *slot = Some(score),
            Some(Some(_)) => {
                return Err(Error::ProviderContract(format!(
                    "index {index} scored twice"
                )))
            }
            None => {
                return Err(Error::ProviderContract(format!(
                    "index {index} out of range"
                )))
            }
        }
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::ProviderContract(format!("document {i} was not scored")))
        })
        .collect()
}

impl RerankBackend for RemoteCrossEncoder {
    fn name(&self) -> &str {
        &self.model
    }

    fn score(&self, query: &str, pool: &[RerankInput<'_>]) -> Result<Vec<f64>> {
        let docs: Vec<&str> = pool.iter().map(|p| p.text).collect();
        let batches: Vec<&[&str]> = docs.chunks(self.batch_size.max(1)).collect();
        let mut out = Vec::with_capacity(docs.len());
        for wave in batches.chunks(self.max_in_flight.max(1)) {
            let results: Vec<Result<Vec<f64>>> = thread::scope(|s| {
                let hs: Vec<_> = wave
                    .iter()
                    .map(|b| s.spawn(|| self.score_batch(query, b)))
                    .collect();
                hs.into_iter()
                    .map(|h| h.join().expect("rerank worker panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

/// Read-only view over the lexical index, vector store and query embedder.
pub struct Retriever<'a> {
    pub index: &'a InvertedIndex,
    pub store: &'a VectorStore,
    pub embedder: &'a dyn EmbeddingProvider,
    pub engine: LexicalEngine,
    pub bm25: Bm25Params,
}

impl Retriever<'_> {
    pub fn lexical(&self, query: &str, k: usize) -> Vec<LexicalHit> {
        self.index.search(self.engine, self.bm25, query, k)
    }

    pub fn semantic(&self, query: &str, k: usize) -> Result<Vec<SemanticHit>> {
        if self.store.is_empty() || query.trim().is_empty() {
            return Ok(Vec::new());
        }
        let q = embed_batch(self.embedder, &[query.to_string()])?;
        self.store.search(q[0].as_slice(), k)
    }

    /// Deduplicated union of the two searches (sorted by id).
    pub fn hybrid(
        &self,
        query: &str,
        lexical_k: usize,
        semantic_k: usize,
        rrf_const: f64,
    ) -> Result<Vec<RankedCandidate>> {
        if lexical_k == 0 || semantic_k == 0 {
            return Err(Error::Invalid("search depths must be at least 1".into()));
        }
        let lex = self.lexical(query, lexical_k);
        let sem = self.semantic(query, semantic_k)?;
        Ok(merge_pool(&lex, &sem, rrf_const))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TransportError;
    use crate::http::testing::ScriptedTransport;

    fn lex(ids: &[&str]) -> Vec<LexicalHit> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| LexicalHit {
                chunk_id: id.to_string(),
                score: 10.0 - i as f64,
                rank: i + 1,
            })
            .collect()
    }

    fn sem(ids: &[&str]) -> Vec<SemanticHit> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| SemanticHit {
                chunk_id: id.to_string(),
                score: 0.9 - 0.1 * i as f64,
                rank: i + 1,
            })
            .collect()
    }

    #[test]
    fn pool_is_union() {
        let pool = merge_pool(&lex(&["d1", "d2"]), &sem(&["d2", "d3"]), 60.0);
        let ids: Vec<_> = pool.iter().map(|c| c.chunk_id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
        assert_eq!(pool[1].lexical_rank, Some(2));
        assert_eq!(pool[1].semantic_rank, Some(1));
        assert_eq!(pool[0].semantic_rank, None);

        let same = merge_pool(&lex(&["a", "b", "c"]), &sem(&["c", "b", "a"]), 60.0);
        assert_eq!(same.len(), 3);
    }

    #[test]
    fn rrf_spot_values() {
        let fused = rrf_fuse(merge_pool(&lex(&["d", "x"]), &sem(&["d"]), 60.0), 60.0).unwrap();
        assert_eq!(fused[0].chunk_id, "d");
        assert_eq!(fused[0].rrf_score, 2.0 / 61.0);
        let fused = rrf_fuse(merge_pool(&lex(&["d"]), &[], 60.0), 60.0).unwrap();
        assert_eq!(fused[0].rrf_score, 1.0 / 61.0);
        assert!(rrf_fuse(Vec::new(), 0.0).is_err());
    }

    fn inputs(pool: &[RankedCandidate]) -> Vec<RerankInput<'_>> {
        pool.iter()
            .map(|c| RerankInput {
                candidate: c,
                text: c.chunk_id.as_str(),
            })
            .collect()
    }

    #[test]
    fn rrf_passthrough_is_prefix_of_fused_order() {
        let fused = rrf_fuse(
            merge_pool(&lex(&["a", "b", "c", "d"]), &sem(&["c", "e", "a"]), 60.0),
            60.0,
        )
        .unwrap();
        let out = rerank(&RrfPassthrough, "q", &inputs(&fused), 3, false).unwrap();
        let got: Vec<_> = out.candidates.iter().map(|c| c.chunk_id.clone()).collect();
        let want: Vec<_> = fused.iter().take(3).map(|c| c.chunk_id.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn remote_scores_select_top() {
        let resp = json!({"results": [{"index": 1, "relevance_score": 0.1}, {"index": 0, "relevance_score": 0.9}]});
        let t = Arc::new(ScriptedTransport::new(vec![Ok(resp)]));
        let backend = RemoteCrossEncoder::new(Endpoint::new("http://h"), "bge", t.clone());
        let pool = merge_pool(&lex(&["d1", "d2"]), &[], 60.0);
        let out = rerank(&backend, "q", &inputs(&pool), 1, false).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.candidates[0].chunk_id, "d1");
        assert_eq!(out.candidates[0].rerank_score, Some(0.9));
        let body = &t.requests.lock().unwrap()[0].1;
        assert_eq!(body["top_n"], 2);
        assert_eq!(body["documents"], json!(["d1", "d2"]));
    }

    #[test]
    fn remote_failure_falls_back_to_rrf() {
        let t = Arc::new(ScriptedTransport::new(vec![Err(
            TransportError::retryable("down"),
        )]));
        let mut backend = RemoteCrossEncoder::new(Endpoint::new("http://h"), "bge", t.clone());
        backend.retry = RetryPolicy {
            max_retries: 0,
            backoff_ms: 0,
        };
        let pool = merge_pool(&lex(&["a", "b"]), &sem(&["b"]), 60.0);
        let out = rerank(&backend, "q", &inputs(&pool), 5, true).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.candidates[0].chunk_id, "b");
        assert_eq!(out.warnings.len(), 1);

        let t = Arc::new(ScriptedTransport::new(vec![Err(
            TransportError::retryable("down"),
        )]));
        let mut backend = RemoteCrossEncoder::new(Endpoint::new("http://h"), "bge", t);
        backend.retry = RetryPolicy {
            max_retries: 0,
            backoff_ms: 0,
        };
        assert!(rerank(&backend, "q", &inputs(&pool), 5, false).is_err());
    }

    #[test]
    fn rerank_response_contract() {
        assert!(parse_rerank_response(
            &json!({"results": [{"index": 0, "relevance_score": 1.0}]}),
            2
        )
        .is_err());
        assert!(parse_rerank_response(
            &json!({"results": [{"index": 3, "relevance_score": 1.0}]}),
            1
        )
        .is_err());
        assert!(parse_rerank_response(&json!({"nope": []}), 1).is_err());
    }

    #[test]
    fn rerank_preconditions() {
        assert!(rerank(&RrfPassthrough, "q", &[], 5, false).is_err());
        let pool = merge_pool(&lex(&["a"]), &[], 60.0);
        assert!(rerank(&RrfPassthrough, "q", &inputs(&pool), 0, false).is_err());
    }
}
