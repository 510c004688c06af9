//! Inverted index with BM25 and TF-IDF scoring.
//!
//! ```text
//! bm25(d, q) = sum_{t in q} idf(t) * tf(t,d) * (k1 + 1) / (tf(t,d) + k1 * (1 - b + b * |d| / avgdl))
//! idf(t)     = ln((N - df(t) + 0.5) / (df(t) + 0.5) + 1)
//! ```
//!
//! Query terms are deduplicated before scoring. TF-IDF is the cosine of
//! ltc-weighted vectors: `(1 + ln tf) * ln(1 + N / df)`, length-normalized.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, Chunk};
use crate::error::{Error, Result};
use crate::tokenize::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexicalEngine {
    #[default]
    Bm25,
    Tfidf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<String, usize>,
    doc_count: usize,
    avg_doc_length: f64,
    /// Length of each document's ltc weight vector, recomputed on load.
    #[serde(skip)]
    tfidf_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

impl InvertedIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self> {
        Self::build_from_texts(chunks.iter().map(|c| (c.id.as_str(), c.text.as_str())))
    }

    pub fn build_from_texts<'a>(
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text);
            if doc_lengths.insert(id.to_string(), tokens.len()).is_some() {
                return Err(Error::DuplicateChunk(id.to_string()));
            }
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, n) in tf {
                postings.entry(term).or_default().push(Posting {
                    chunk_id: id.to_string(),
                    tf: n,
                });
            }
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        }
        let doc_count = doc_lengths.len();
        let mut index = Self {
            postings,
            doc_lengths,
            doc_count,
            avg_doc_length: 0.0,
            tfidf_norms: BTreeMap::new(),
        };
        index.avg_doc_length = index.mean_doc_length();
        index.tfidf_norms = index.compute_tfidf_norms();
        Ok(index)
    }

    fn compute_tfidf_norms(&self) -> BTreeMap<String, f64> {
        let mut sq: BTreeMap<String, f64> =
            self.doc_lengths.keys().map(|k| (k.clone(), 0.0)).collect();
        for list in self.postings.values() {
            let idf = self.tfidf_idf(list.len());
            for p in list {
                let w = ltc_tf(p.tf) * idf;
                *sq.get_mut(&p.chunk_id).expect("posting for unknown doc") += w * w;
            }
        }
        sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, chunk_id: &str) -> Option<usize> {
        self.doc_lengths.get(chunk_id).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn bm25_idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn tfidf_idf(&self, df: usize) -> f64 {
        (1.0 + self.doc_count as f64 / df as f64).ln()
    }

    pub fn search(
        &self,
        engine: LexicalEngine,
        params: Bm25Params,
        query: &str,
        k: usize,
    ) -> Vec<LexicalHit> {
        match engine {
            LexicalEngine::Bm25 => self.bm25_search(query, k, params),
            LexicalEngine::Tfidf => self.tfidf_search(query, k),
        }
    }

    pub fn bm25_search(&self, query: &str, k: usize, params: Bm25Params) -> Vec<LexicalHit> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for term in &terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.bm25_idf(list.len());
            for p in list {
                let len = self.doc_lengths[&p.chunk_id] as f64;
                let tf = p.tf as f64;
                let norm = 1.0 - params.b + params.b * len / self.avg_doc_length;
                *scores.entry(&p.chunk_id).or_default() +=
                    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
            }
        }
        rank_hits(scores, k)
    }

    pub fn tfidf_search(&self, query: &str, k: usize) -> Vec<LexicalHit> {
        let mut qtf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(query) {
            *qtf.entry(t).or_default() += 1;
        }
        let mut qweights = Vec::new();
        for (term, n) in &qtf {
            let list = self.postings(term);
            if !list.is_empty() {
                qweights.push((
                    list,
                    self.tfidf_idf(list.len()),
                    ltc_tf(*n) * self.tfidf_idf(list.len()),
                ));
            }
        }
        let qnorm = qtf
            .iter()
            .map(|(term, n)| {
                let df = self.document_frequency(term);
                if df == 0 {
                    0.0
                } else {
                    let w = ltc_tf(*n) * self.tfidf_idf(df);
                    w * w
                }
            })
            .sum::<f64>()
            .sqrt();
        if qnorm == 0.0 {
            return Vec::new();
        }
        let mut scores: HashMap<&str, f64> = HashMap::new();
        for (list, idf, qw) in qweights {
            for p in list {
                let dw = ltc_tf(p.tf) * idf;
                *scores.entry(&p.chunk_id).or_default() += qw * dw;
            }
        }
        for (id, s) in scores.iter_mut() {
            *s /= qnorm * self.tfidf_norms[*id];
        }
        rank_hits(scores, k)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Parses and validates a persisted index.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut index: Self = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        index.validate()?;
        index.avg_doc_length = index.mean_doc_length();
        index.tfidf_norms = index.compute_tfidf_norms();
        Ok(index)
    }

    fn mean_doc_length(&self) -> f64 {
        if self.doc_count == 0 {
            0.0
        } else {
            self.doc_lengths.values().sum::<usize>() as f64 / self.doc_count as f64
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("corrupt lexical index: {m}")));
        if self.doc_count != self.doc_lengths.len() {
            return bad("doc_count does not match doc_lengths".into());
        }
        for (term, list) in &self.postings {
            if list.is_empty() {
                return bad(format!("term `{term}` has no postings"));
            }
            if list.windows(2).any(|w| w[0].chunk_id >= w[1].chunk_id) {
                return bad(format!("postings for `{term}` not strictly sorted"));
            }
            for p in list {
                if p.tf == 0 {
                    return bad(format!("term `{term}` has zero frequency"));
                }
                if !self.doc_lengths.contains_key(&p.chunk_id) {
                    return bad(format!("posting for unknown chunk `{}`", p.chunk_id));
                }
            }
        }
        let mean = self.mean_doc_length();
        if (mean - self.avg_doc_length).abs() > 1e-9 * mean.max(1.0) {
            return bad("avg_doc_length inconsistent".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }
}

fn ltc_tf(tf: u32) -> f64 {
    1.0 + (tf as f64).ln()
}

/// Top `k` positive scores, descending, ties by ascending id.
fn rank_hits(scores: HashMap<&str, f64>, k: usize) -> Vec<LexicalHit> {
    let mut hits: Vec<(&str, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    hits.truncate(k);
    hits.into_iter()
        .enumerate()
        .map(|(i, (id, score))| LexicalHit {
            chunk_id: id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}
