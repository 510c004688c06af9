//! Exact cosine-similarity search over chunk embeddings, and the embedding
//! providers that produce them.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::http::{Endpoint, RetryPolicy, Transport};
use crate::tokenize::tokenize;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::ProviderContract(
                "embedding has zero dimensions".into(),
            ));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::ProviderContract(
                "embedding contains NaN or Inf".into(),
            ));
        }
        Ok(Self { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }
}

/// Cosine similarity in f64. A zero-norm side yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw provider call; prefer [`embed_batch`], which checks the contract.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

/// Embeds `texts` in order, enforcing one vector per input of the provider's dimension.
pub fn embed_batch(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<Vec<Embedding>> {
    if texts.is_empty() {
        return Err(Error::Invalid("embed_batch needs at least one text".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::Invalid(format!("text {i} is empty")));
    }
    let out = provider.embed(texts)?;
    if out.len() != texts.len() {
        return Err(Error::ProviderContract(format!(
            "{} returned {} embeddings for {} inputs",
            provider.name(),
            out.len(),
            texts.len()
        )));
    }
    if let Some(e) = out.iter().find(|e| e.dim() != provider.dim()) {
        return Err(Error::ProviderContract(format!(
            "{} returned a {}-dim vector, expected {}",
            provider.name(),
            e.dim(),
            provider.dim()
        )));
    }
    Ok(out)
}

/// Offline deterministic embedder: signed feature hashing of the token
/// multiset (weight `1 + ln tf`) into `dim` buckets, normalized to unit length.
/// Texts sharing tokens land close together; a text without tokens maps to
/// the zero vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

const HASH_PROBES: u64 = 2;

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("hash embedder dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_default() += 1;
        }
        let mut v = vec![0.0; self.dim];
        for (token, n) in tf {
            let base = fnv1a(self.seed, token.as_bytes());
            let w = 1.0 + (n as f64).ln();
            for probe in 0..HASH_PROBES {
                let h = splitmix64(base.wrapping_add(probe));
                let bucket = (h % self.dim as u64) as usize;
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[bucket] += sign * w;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| Embedding::new(self.embed_text(t)))
            .collect()
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// OpenAI-compatible `POST {base}/v1/embeddings` client.
pub struct RemoteEmbedder {
    pub endpoint: Endpoint,
    pub model: String,
    pub dim: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    transport: Arc<dyn Transport>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: Endpoint,
        model: impl Into<String>,
        dim: usize,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model: model.into(),
            dim,
            batch_size: 32,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            transport,
        }
    }

    fn embed_one_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let body = json!({ "model": self.model, "input": texts });
        let url = self.endpoint.url("/v1/embeddings");
        let key = self.endpoint.api_key();
        let resp = self
            .retry
            .run(|| self.transport.post_json(&url, &body, key.as_deref()))?;
        parse_embeddings_response(&resp, texts.len())
    }
}

/// Reorders `data[].embedding` by `data[].index`, requiring exactly `expected` entries.
pub fn parse_embeddings_response(resp: &Value, expected: usize) -> Result<Vec<Embedding>> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::ProviderContract("response has no `data` array".into()))?;
    if data.len() != expected {
        return Err(Error::ProviderContract(format!(
            "{} embeddings returned for {expected} inputs",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Embedding>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = match item.get("index") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::ProviderContract("non-integer `index`".into()))?
                as usize,
            None => pos,
        };
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| {
                Error::ProviderContract(format!("entry {pos} has no `embedding` array"))
            })?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::ProviderContract("non-numeric embedding value".into()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let slot = slots
            .get_mut(index)
            .ok_or_else(|| Error::ProviderContract(format!("index {index} out of range")))?;
        if slot.is_some() {
            return Err(Error::ProviderContract(format!(
                "index {index} returned twice"
            )));
        }
        *slot = Some(Embedding::new(vector)?);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect())
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let batches: Vec<&[String]> = texts.chunks(self.batch_size.max(1)).collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in batches.chunks(self.max_in_flight.max(1)) {
            let results: Vec<Result<Vec<Embedding>>> = thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|b| s.spawn(|| self.embed_one_batch(b)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable embedding store. Vectors are held as f32; similarities are
/// computed in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"DQVS";
const FORMAT_VERSION: u32 = 1;

impl VectorStore {
    /// Entries are sorted by chunk id.
    pub fn build(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("vector store dim must be positive".into()));
        }
        let mut entries: Vec<(String, Vec<f64>)> = entries.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Invalid(format!(
                    "`{id}` has dim {}, store dim is {dim}",
                    v.len()
                )));
            }
            if v.iter()
                .any(|x| !x.is_finite() || (*x as f32).is_infinite())
            {
                return Err(Error::Invalid(format!("`{id}` has a non-finite component")));
            }
            if ids.last() == Some(&id) {
                return Err(Error::DuplicateChunk(id));
            }
            ids.push(id);
            data.extend(v.iter().map(|x| *x as f32));
        }
        Ok(Self::from_parts(dim, ids, data))
    }

    fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Self {
        let norms = data
            .chunks(dim)
            .map(|row| {
                row.iter()
                    .map(|x| (*x as f64) * (*x as f64))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self {
            dim,
            ids,
            data,
            norms,
        }
    }

    /// Embeds every `(id, text)` pair with `provider`.
    pub fn embed_chunks<'a>(
        provider: &dyn EmbeddingProvider,
        chunks: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let (ids, texts): (Vec<String>, Vec<String>) = chunks
            .into_iter()
            .map(|(i, t)| (i.to_string(), t.to_string()))
            .unzip();
        if ids.is_empty() {
            return Self::build(provider.dim(), Vec::new());
        }
        let vectors = embed_batch(provider, &texts)?;
        Self::build(
            provider.dim(),
            ids.into_iter()
                .zip(vectors.into_iter().map(Embedding::into_vec)),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<Vec<f64>> {
        let i = self.ids.binary_search_by(|p| p.as_str().cmp(id)).ok()?;
        Some(self.row(i).iter().map(|x| *x as f64).collect())
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-`k` by cosine, descending, ties by ascending id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<SemanticHit>> {
        if query.len() != self.dim {
            return Err(Error::Invalid(format!(
                "query dim {} does not match store dim {}",
                query.len(),
                self.dim
            )));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len())
            .map(|i| {
                let n = self.norms[i];
                if qn == 0.0 || n == 0.0 {
                    return (i, 0.0);
                }
                let dot: f64 = self
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| *a as f64 * b)
                    .sum();
                (i, (dot / (qn * n)).clamp(-1.0, 1.0))
            })
            .collect();
        // ids are sorted, so index order is id order
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (i, score))| SemanticHit {
                chunk_id: self.ids[i].clone(),
                score,
                rank: r + 1,
            })
            .collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            16 + self.data.len() * 4 + self.ids.iter().map(|s| s.len() + 4).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in self.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dim == 0 {
            return Err(r.err("zero dim"));
        }
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("id is not UTF-8"))?
                .to_string();
            let raw = r.take(dim.checked_mul(4).ok_or_else(|| r.err("dim overflow"))?)?;
            for c in raw.chunks_exact(4) {
                let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !x.is_finite() {
                    return Err(r.err("non-finite component"));
                }
                data.push(x);
            }
            if !seen.insert(id.clone()) || ids.last().is_some_and(|p: &String| *p > id) {
                return Err(r.err("ids not strictly sorted"));
            }
            ids.push(id);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self::from_parts(dim, ids, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| self.err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn err(&self, msg: &str) -> Error {
        Error::Invalid(format!("vector store decode at byte {}: {msg}", self.pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testing::ScriptedTransport;

    #[test]
    fn orthonormal_search() {
        let store = VectorStore::build(
            2,
            [("d1".into(), vec![1.0, 0.0]), ("d2".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let hits = store.search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(
            hits[0],
            SemanticHit {
                chunk_id: "d1".into(),
                score: 1.0,
                rank: 1
            }
        );
        assert_eq!(
            hits[1],
            SemanticHit {
                chunk_id: "d2".into(),
                score: 0.0,
                rank: 2
            }
        );
    }

    #[test]
    fn zero_query_keeps_id_order() {
        let store = VectorStore::build(
            2,
            [
                ("b".into(), vec![1.0, 0.0]),
                ("a".into(), vec![0.0, 1.0]),
                ("c".into(), vec![1.0, 1.0]),
            ],
        )
        .unwrap();
        let hits = store.search(&[0.0, 0.0], 3).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(hits.iter().all(|h| h.score == 0.0));
    }

    #[test]
    fn empty_store_and_dim_mismatch() {
        let store = VectorStore::build(3, Vec::new()).unwrap();
        assert!(store.search(&[1.0, 0.0, 0.0], 5).unwrap().is_empty());
        assert!(store.search(&[1.0], 5).is_err());
        assert!(VectorStore::build(2, [("a".into(), vec![1.0])]).is_err());
        assert!(VectorStore::build(1, [("a".into(), vec![1.0]), ("a".into(), vec![2.0])]).is_err());
    }

    #[test]
    fn hash_embedder_is_deterministic_and_discriminative() {
        let e = HashEmbedder::new(64, 7).unwrap();
        let a = e.embed_text("global_route -guide_file out.guide");
        assert_eq!(a, e.embed_text("global_route -guide_file out.guide"));
        let b = e.embed_text("detailed_placement -max_displacement 5");
        assert_ne!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.embed_text("!!").iter().all(|x| *x == 0.0));
        // token overlap pulls vectors together
        let c = e.embed_text("global_route guide");
        assert!(cosine(&a, &c) > cosine(&b, &c));
    }

    #[test]
    fn binary_round_trip() {
        let store = VectorStore::build(
            3,
            [
                ("x".into(), vec![0.1, -2.5, 3.0]),
                ("y".into(), vec![0.0, 0.0, 1e-3]),
            ],
        )
        .unwrap();
        let bytes = store.encode();
        assert_eq!(VectorStore::decode(&bytes).unwrap(), store);
        assert!(VectorStore::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(VectorStore::decode(&extra).is_err());
    }

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn remote_count_mismatch_is_contract_error() {
        let resp = json!({"data": [
            {"index": 0, "embedding": [1.0, 0.0]},
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 2, "embedding": [1.0, 1.0]},
        ]});
        let t = Arc::new(ScriptedTransport::new(vec![Ok(resp)]));
        let p = RemoteEmbedder::new(Endpoint::new("http://localhost:1"), "m", 2, t);
        let err = embed_batch(&p, &texts(&["a", "b"])).unwrap_err();
        assert!(matches!(err, Error::ProviderContract(_)), "{err}");
    }

    #[test]
    fn remote_reorders_by_index_and_checks_dim() {
        let resp = json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]},
        ]});
        let t = Arc::new(ScriptedTransport::new(vec![Ok(resp.clone())]));
        let p = RemoteEmbedder::new(Endpoint::new("http://localhost:1"), "m", 2, t.clone());
        let out = embed_batch(&p, &texts(&["a", "b"])).unwrap();
        assert_eq!(out[0].as_slice(), &[1.0, 0.0]);
        let (url, body) = t.requests.lock().unwrap()[0].clone();
        assert_eq!(url, "http://localhost:1/v1/embeddings");
        assert_eq!(body, json!({"model": "m", "input": ["a", "b"]}));

        let t = Arc::new(ScriptedTransport::new(vec![Ok(resp)]));
        let p = RemoteEmbedder::new(Endpoint::new("http://localhost:1"), "m", 3, t);
        assert!(matches!(
            embed_batch(&p, &texts(&["a", "b"])),
            Err(Error::ProviderContract(_))
        ));
    }

    #[test]
    fn remote_batches_preserve_order() {
        let t = Arc::new(ScriptedTransport::new(vec![
            Ok(
                json!({"data": [{"index": 0, "embedding": [1.0]}, {"index": 1, "embedding": [2.0]}]}),
            ),
            Ok(json!({"data": [{"index": 0, "embedding": [3.0]}]})),
        ]));
        let mut p = RemoteEmbedder::new(Endpoint::new("http://h"), "m", 1, t);
        p.batch_size = 2;
        p.max_in_flight = 1;
        let out = embed_batch(&p, &texts(&["a", "b", "c"])).unwrap();
        let flat: Vec<f64> = out.iter().map(|e| e.as_slice()[0]).collect();
        assert_eq!(flat, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn remote_transport_failure_after_retries() {
        let t = Arc::new(ScriptedTransport::new(vec![]));
        let mut p = RemoteEmbedder::new(Endpoint::new("http://h"), "m", 1, t.clone());
        p.retry = RetryPolicy {
            max_retries: 1,
            backoff_ms: 0,
        };
        assert!(matches!(
            embed_batch(&p, &texts(&["a"])),
            Err(Error::Transport { attempts: 2, .. })
        ));
        assert_eq!(t.calls(), 2);
    }
}
