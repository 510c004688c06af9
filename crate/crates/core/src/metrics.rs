//! Retrieval and answer-quality metrics: recall@k, single-reference BLEU,
//! ROUGE-L, and an adapter for an external factual-consistency judge.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{Endpoint, RetryPolicy, Transport};
use crate::tokenize::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub name: String,
    pub value: f64,
    pub details: BTreeMap<String, f64>,
}

pub fn recall_at_k<S: AsRef<str>>(
    relevant: &HashSet<String>,
    retrieved: &[S],
    k: usize,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric(
            "recall@k with no relevant documents".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Invalid("recall@k needs k >= 1".into()));
    }
    let top: HashSet<&str> = retrieved.iter().take(k).map(AsRef::as_ref).collect();
    let hit = relevant.iter().filter(|r| top.contains(r.as_str())).count();
    Ok(hit as f64 / relevant.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// `BP * exp(sum w_n ln p_n)` with clipped precisions, uniform weights over
/// `min(max_n, |candidate|)` orders and `BP = exp(1 - r/c)` when `c <= r`.
/// Any zero precision makes the score 0; no smoothing.
pub fn bleu<S: AsRef<str>>(candidate: &[S], reference: &[S], max_n: usize) -> Result<MetricScore> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric(
            "BLEU with an empty reference".into(),
        ));
    }
    if max_n == 0 {
        return Err(Error::Invalid("BLEU max_n must be at least 1".into()));
    }
    let c = candidate.len();
    let r = reference.len();
    let mut details = BTreeMap::from([("c".to_string(), c as f64), ("r".to_string(), r as f64)]);
    if c == 0 {
        details.insert("bp".into(), 0.0);
        return Ok(MetricScore {
            name: "bleu".into(),
            value: 0.0,
            details,
        });
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let n_eff = max_n.min(c);
    details.insert("bp".into(), bp);
    details.insert("n_eff".into(), n_eff as f64);

    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=n_eff {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = cand
            .iter()
            .map(|(g, k)| (*k).min(*refc.get(g).unwrap_or(&0)))
            .sum();
        let p = matched as f64 / (c - n + 1) as f64;
        details.insert(format!("p{n}"), p);
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln() / n_eff as f64;
        }
    }
    let value = if zero {
        0.0
    } else {
        (bp * log_sum.exp()).min(1.0)
    };
    Ok(MetricScore {
        name: "bleu".into(),
        value,
        details,
    })
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of candidate `X` against reference `Y`.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S], beta: f64) -> Result<MetricScore> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric(
            "ROUGE-L with an empty reference".into(),
        ));
    }
    let lcs = lcs_len(candidate, reference);
    let mut details = BTreeMap::from([("lcs".to_string(), lcs as f64)]);
    if candidate.is_empty() || lcs == 0 {
        details.insert("precision".into(), 0.0);
        details.insert("recall".into(), 0.0);
        return Ok(MetricScore {
            name: "rouge_l".into(),
            value: 0.0,
            details,
        });
    }
    let recall = lcs as f64 / reference.len() as f64;
    let precision = lcs as f64 / candidate.len() as f64;
    let b2 = beta * beta;
    let f = (1.0 + b2) * precision * recall / (b2 * precision + recall);
    details.insert("precision".into(), precision);
    details.insert("recall".into(), recall);
    Ok(MetricScore {
        name: "rouge_l".into(),
        value: f,
        details,
    })
}

/// BLEU over the shared tokenizer's output.
pub fn bleu_text(candidate: &str, reference: &str) -> Result<MetricScore> {
    bleu(&tokenize(candidate), &tokenize(reference), 4)
}

pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<MetricScore> {
    rouge_l(&tokenize(candidate), &tokenize(reference), 1.0)
}

/// External judge of factual consistency, scoring in `[0, 1]`.
pub trait ConsistencyJudge: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JudgeOutcome {
    Scored { value: f64 },
    Unavailable { reason: String },
}

impl JudgeOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            JudgeOutcome::Scored { value } => Some(*value),
            JudgeOutcome::Unavailable { .. } => None,
        }
    }
}

/// Never collapses a failure into a zero score.
pub fn judge_consistency(
    judge: &dyn ConsistencyJudge,
    question: &str,
    answer: &str,
    reference: &str,
) -> JudgeOutcome {
    match judge.score(question, answer, reference) {
        Ok(v) if (0.0..=1.0).contains(&v) => JudgeOutcome::Scored { value: v },
        Ok(v) => JudgeOutcome::Unavailable {
            reason: format!("judge `{}` returned out-of-range score {v}", judge.name()),
        },
        Err(e) => JudgeOutcome::Unavailable {
            reason: e.to_string(),
        },
    }
}

/// `POST {base}/judge` with `{question, answer, reference}` → `{consistency}`.
pub struct RemoteJudge {
    pub endpoint: Endpoint,
    pub name: String,
    pub retry: RetryPolicy,
    transport: Arc<dyn Transport>,
}

impl RemoteJudge {
    pub fn new(endpoint: Endpoint, name: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            name: name.into(),
            retry: RetryPolicy::default(),
            transport,
        }
    }
}

impl ConsistencyJudge for RemoteJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<f64> {
        let body = json!({"question": question, "answer": answer, "reference": reference});
        let url = self.endpoint.url("/judge");
        let key = self.endpoint.api_key();
        let resp = self
            .retry
            .run(|| self.transport.post_json(&url, &body, key.as_deref()))?;
        resp.get("consistency")
            .and_then(Value::as_f64)
            .ok_or_else(|| {
                Error::ProviderContract("judge response has no numeric `consistency`".into())
            })
    }
}

/// Returns a fixed score.
#[derive(Debug, Clone)]
pub struct FixedJudge(pub f64);

impl ConsistencyJudge for FixedJudge {
    fn name(&self) -> &str {
        "fixed"
    }

    fn score(&self, _q: &str, _a: &str, _r: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// 1.0 when answer and reference tokenize identically, else 0.0.
#[derive(Debug, Clone, Default)]
pub struct EchoJudge;

impl ConsistencyJudge for EchoJudge {
    fn name(&self) -> &str {
        "echo"
    }

    fn score(&self, _q: &str, answer: &str, reference: &str) -> Result<f64> {
        Ok(if tokenize(answer) == tokenize(reference) {
            1.0
        } else {
            0.0
        })
    }
}
