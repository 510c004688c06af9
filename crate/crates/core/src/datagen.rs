//! Builders for the three training sets: embedding triplets with
//! substituted-terminology hard negatives, LLM-labelled reranker
//! examples, and instruction-tuning `{question, references, answer}`
//! triplets.
//!
//! All builders take a [`ChatClient`], so a [`crate::generation::CannedClient`]
//! fixture makes them fully offline. Canned lookups use these keys:
//!
//! | builder  | key                                   |
//! |----------|---------------------------------------|
//! | triplets | `query:{term}`, `answer:{query}`, `paraphrase:{query}` |
//! | reranker | `label:{question_id}`                 |
//! | instruct | `instruct:{round}`, `instruct:{round}:retry{n}` |

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{write_atomic, Chunk};
use crate::error::{Error, Result};
use crate::generation::{generate_answer, ChatClient, RenderedPrompt};
use crate::losses::RerankBatch;
use crate::pipeline::Pipeline;
use crate::retrieval::{RankedCandidate, RerankBackend, RerankInput};

/// Search depth per searcher when collecting reranker candidates.
pub const RERANK_POOL_K: usize = 10;
pub const INSTRUCT_POOL_SIZE: usize = 10;
pub const DEFAULT_REASKS: usize = 2;

const BUILTIN_TERMS: &str = include_str!("../data/eda_terms.txt");

/// A versioned prompt asset: `version: <id>`, a `---` line, then the body.
/// The body's first paragraph becomes the system message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAsset {
    pub version: String,
    system: String,
    user: String,
}

impl PromptAsset {
    pub fn parse(text: &str) -> Result<Self> {
        let (head, body) = text
            .split_once("\n---\n")
            .ok_or_else(|| Error::Config("prompt asset lacks a `---` separator".into()))?;
        let version = head
            .trim()
            .strip_prefix("version:")
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Config("prompt asset lacks a `version:` line".into()))?
            .to_string();
        let body = body.trim();
        let (system, user) = body.split_once("\n\n").unwrap_or(("", body));
        Ok(Self {
            version,
            system: system.trim().into(),
            user: user.trim().into(),
        })
    }

    pub fn render(&self, vars: &[(&str, &str)], lookup_key: impl Into<String>) -> RenderedPrompt {
        let fill = |s: &str| {
            vars.iter().fold(s.to_string(), |acc, (k, v)| {
                acc.replace(&format!("{{{k}}}"), v)
            })
        };
        RenderedPrompt::new(fill(&self.system), fill(&self.user), lookup_key)
    }
}

macro_rules! builtin_prompt {
    ($fn:ident, $file:literal) => {
        pub fn $fn() -> PromptAsset {
            PromptAsset::parse(include_str!(concat!("../prompts/", $file)))
                .expect(concat!("bundled prompt ", $file))
        }
    };
}

pub mod prompts {
    use super::PromptAsset;

    builtin_prompt!(triplet_query, "triplet_query.txt");
    builtin_prompt!(triplet_answer, "triplet_answer.txt");
    builtin_prompt!(triplet_paraphrase, "triplet_paraphrase.txt");
    builtin_prompt!(rerank_label, "rerank_label.txt");
    builtin_prompt!(instruct, "instruct.txt");
    builtin_prompt!(instruct_retry, "instruct_retry.txt");
}

/// Deduplicated (case-insensitively) terminology list in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermList(Vec<String>);

impl TermList {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TERMS)
    }

    /// One term per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let mut seen = HashSet::new();
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .filter(|l| seen.insert(l.to_lowercase()))
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| Error::io(path, e))
    }

    pub fn terms(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn seeded(seed: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte ranges of whole-word, case-insensitive occurrences of `term`.
fn occurrences(text: &str, term: &str) -> Vec<(usize, usize)> {
    let re = RegexBuilder::new(&regex::escape(term))
        .case_insensitive(true)
        .build()
        .expect("escaped literal is a valid pattern");
    let mut out = Vec::new();
    let mut at = 0;
    while let Some(m) = re.find_at(text, at) {
        let before = text[..m.start()].chars().next_back();
        let after = text[m.end()..].chars().next();
        if before.is_none_or(|c| !is_word_char(c)) && after.is_none_or(|c| !is_word_char(c)) {
            out.push((m.start(), m.end()));
            at = m.end();
        } else {
            at = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
        }
        if at > text.len() {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub negative: String,
    pub terminology: String,
    pub substituted_terminology: String,
    pub occurrences: usize,
}

/// Replaces every whole-word occurrence of `terminology` in `query` with a
/// different term drawn uniformly (seeded) from `terms`.
pub fn make_negative_by_substitution(
    query: &str,
    terminology: &str,
    terms: &[String],
    seed: u64,
) -> Result<Substitution> {
    if terms.len() < 2 {
        return Err(Error::Construction(
            "term list needs at least two entries".into(),
        ));
    }
    let hits = occurrences(query, terminology);
    if terminology.trim().is_empty() || hits.is_empty() {
        return Err(Error::Construction(format!(
            "terminology `{terminology}` does not occur in the query"
        )));
    }
    let lower = terminology.to_lowercase();
    let choices: Vec<&String> = terms.iter().filter(|t| t.to_lowercase() != lower).collect();
    let replacement = choices.choose(&mut seeded(seed, 0)).ok_or_else(|| {
        Error::Construction(format!("no term other than `{terminology}` to substitute"))
    })?;
    let mut negative = String::with_capacity(query.len());
    let mut last = 0;
    for &(s, e) in &hits {
        negative.push_str(&query[last..s]);
        negative.push_str(replacement);
        last = e;
    }
    negative.push_str(&query[last..]);
    Ok(Substitution {
        negative,
        terminology: terminology.to_string(),
        substituted_terminology: (*replacement).clone(),
        occurrences: hits.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveMode {
    /// The LLM's answer to the query.
    #[default]
    Answer,
    /// A differently-phrased question about the same term.
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTriplet {
    pub query: String,
    pub positive: String,
    pub negative: String,
    pub terminology: String,
    pub substituted_terminology: String,
    pub positive_mode: PositiveMode,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub item: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport<T> {
    pub records: Vec<T>,
    pub rejected: Vec<Rejection>,
}

fn ask(client: &dyn ChatClient, prompt: &RenderedPrompt) -> Result<String> {
    Ok(generate_answer(client, prompt)?
        .answer_text
        .trim()
        .to_string())
}

/// One triplet per term: the LLM writes a query mentioning the term and
/// the positive; the negative swaps the term for another from `terms`.
pub fn build_triplets(
    selected: &[String],
    terms: &TermList,
    client: &dyn ChatClient,
    mode: PositiveMode,
    seed: u64,
) -> BuildReport<ContrastiveTriplet> {
    let q_prompt = prompts::triplet_query();
    let p_prompt = match mode {
        PositiveMode::Answer => prompts::triplet_answer(),
        PositiveMode::Paraphrase => prompts::triplet_paraphrase(),
    };
    let version = format!("{}+{}", q_prompt.version, p_prompt.version);
    let results: Vec<std::result::Result<ContrastiveTriplet, Rejection>> = selected
        .par_iter()
        .enumerate()
        .map(|(i, term)| {
            let reject = |reason: String, raw: Option<String>| Rejection {
                item: term.clone(),
                reason,
                raw,
            };
            let query = ask(
                client,
                &q_prompt.render(&[("term", term)], format!("query:{term}")),
            )
            .map_err(|e| reject(e.to_string(), None))?;
            let query = query.lines().next().unwrap_or("").trim().to_string();
            let sub = make_negative_by_substitution(
                &query,
                term,
                terms.terms(),
                seed.wrapping_add(i as u64),
            )
            .map_err(|e| reject(e.to_string(), Some(query.clone())))?;
            let key = match mode {
                PositiveMode::Answer => format!("answer:{query}"),
                PositiveMode::Paraphrase => format!("paraphrase:{query}"),
            };
            let positive = ask(
                client,
                &p_prompt.render(&[("term", term), ("query", &query)], key),
            )
            .map_err(|e| reject(e.to_string(), None))?;
            Ok(ContrastiveTriplet {
                query,
                positive,
                negative: sub.negative,
                terminology: sub.terminology,
                substituted_terminology: sub.substituted_terminology,
                positive_mode: mode,
                prompt_version: version.clone(),
            })
        })
        .collect();
    split_results(results)
}

fn split_results<T>(results: Vec<std::result::Result<T, Rejection>>) -> BuildReport<T> {
    let mut report = BuildReport {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for r in results {
        match r {
            Ok(t) => report.records.push(t),
            Err(e) => {
                log::warn!("rejected `{}`: {}", e.item, e.reason);
                report.rejected.push(e);
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankQuestion {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub reference_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankerExample {
    pub question_id: String,
    pub question: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub prompt_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    WeaklyRelated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFailure {
    pub transport: bool,
    pub message: String,
    pub raw: Option<String>,
}

/// Labels each pooled candidate as relevant or weakly related.
pub trait RelevanceLabeler: Send + Sync {
    fn version(&self) -> String;
    fn label(
        &self,
        q: &RerankQuestion,
        candidates: &[(&str, &str)],
    ) -> std::result::Result<Vec<Relevance>, LabelFailure>;
}

/// Marks exactly the question's reference chunks relevant.
#[derive(Debug, Clone, Default)]
pub struct ReferenceLabeler;

impl RelevanceLabeler for ReferenceLabeler {
    fn version(&self) -> String {
        "reference-labels".into()
    }

    fn label(
        &self,
        q: &RerankQuestion,
        candidates: &[(&str, &str)],
    ) -> std::result::Result<Vec<Relevance>, LabelFailure> {
        Ok(candidates
            .iter()
            .map(|(id, _)| {
                if q.reference_chunk_ids.iter().any(|r| r == id) {
                    Relevance::Relevant
                } else {
                    Relevance::WeaklyRelated
                }
            })
            .collect())
    }
}

/// Asks a chat model with the bundled labelling prompt.
pub struct LlmLabeler<'a> {
    pub client: &'a dyn ChatClient,
    pub prompt: PromptAsset,
}

impl<'a> LlmLabeler<'a> {
    pub fn new(client: &'a dyn ChatClient) -> Self {
        Self {
            client,
            prompt: prompts::rerank_label(),
        }
    }
}

impl RelevanceLabeler for LlmLabeler<'_> {
    fn version(&self) -> String {
        self.prompt.version.clone()
    }

    fn label(
        &self,
        q: &RerankQuestion,
        candidates: &[(&str, &str)],
    ) -> std::result::Result<Vec<Relevance>, LabelFailure> {
        let listing: String = candidates
            .iter()
            .map(|(id, text)| format!("[{id}]\n{text}\n\n"))
            .collect();
        let prompt = self.prompt.render(
            &[("question", &q.question), ("chunks", listing.trim_end())],
            format!("label:{}", q.id),
        );
        let raw = ask(self.client, &prompt).map_err(|e| LabelFailure {
            transport: matches!(e, Error::Transport { .. }),
            message: e.to_string(),
            raw: None,
        })?;
        let ids: Vec<&str> = candidates.iter().map(|(id, _)| *id).collect();
        parse_label_response(&raw, &ids).map_err(|message| LabelFailure {
            transport: false,
            message,
            raw: Some(raw),
        })
    }
}

/// The first `{ ... }` span of an LLM reply, tolerating prose or code fences around it.
fn json_object(raw: &str) -> std::result::Result<Value, String> {
    let start = raw.find('{').ok_or("reply contains no JSON object")?;
    let end = raw
        .rfind('}')
        .filter(|&e| e > start)
        .ok_or("reply contains no JSON object")?;
    serde_json::from_str(&raw[start..=end]).map_err(|e| format!("reply is not valid JSON: {e}"))
}

/// Parses `{"labels": [{"id", "label"}]}`; every id must be labelled exactly once.
pub fn parse_label_response(
    raw: &str,
    ids: &[&str],
) -> std::result::Result<Vec<Relevance>, String> {
    let v = json_object(raw)?;
    let labels = v
        .get("labels")
        .and_then(Value::as_array)
        .ok_or("reply has no `labels` array")?;
    let mut got: BTreeMap<&str, Relevance> = BTreeMap::new();
    for l in labels {
        let id = l
            .get("id")
            .and_then(Value::as_str)
            .ok_or("label without string `id`")?;
        let label = l
            .get("label")
            .and_then(Value::as_str)
            .ok_or("label without string `label`")?;
        let rel = match label
            .trim()
            .to_lowercase()
            .replace(['-', ' '], "_")
            .as_str()
        {
            "relevant" => Relevance::Relevant,
            "weakly_related" | "irrelevant" | "not_relevant" => Relevance::WeaklyRelated,
            other => return Err(format!("unknown label `{other}` for `{id}`")),
        };
        let known = ids
            .iter()
            .find(|x| **x == id)
            .ok_or_else(|| format!("label for unknown chunk `{id}`"))?;
        if got.insert(known, rel).is_some() {
            return Err(format!("chunk `{id}` labelled twice"));
        }
    }
    ids.iter()
        .map(|id| {
            got.get(id)
                .copied()
                .ok_or_else(|| format!("chunk `{id}` was not labelled"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerRun {
    pub records: Vec<RerankerExample>,
    pub rejected: Vec<Rejection>,
    /// Questions skipped because the labeller could not be reached.
    pub transport_failures: usize,
    /// Questions dropped because nothing in the pool was judged relevant.
    pub no_positive: usize,
}

/// Pools `lexical_k + semantic_k` hybrid candidates per question, labels
/// them, and partitions the pool into positives and negatives.
pub fn build_reranker_dataset(
    pipeline: &Pipeline,
    questions: &[RerankQuestion],
    labeler: &dyn RelevanceLabeler,
    lexical_k: usize,
    semantic_k: usize,
) -> Result<RerankerRun> {
    let cfg = pipeline.config();
    let retriever = pipeline.retriever(cfg);
    let version = labeler.version();
    let results: Vec<Result<std::result::Result<RerankerExample, (LabelFailure, String)>>> =
        questions
            .par_iter()
            .map(|q| {
                let pool = retriever.hybrid(&q.question, lexical_k, semantic_k, cfg.rrf_const)?;
                let cands: Vec<(&str, &str)> = pool
                    .iter()
                    .map(|c| {
                        let text = pipeline
                            .chunk(&c.chunk_id)
                            .map(|ch| ch.text.as_str())
                            .unwrap_or("");
                        (c.chunk_id.as_str(), text)
                    })
                    .collect();
                Ok(match labeler.label(q, &cands) {
                    Ok(labels) => {
                        let (mut positives, mut negatives) = (Vec::new(), Vec::new());
                        for ((id, _), l) in cands.iter().zip(labels) {
                            match l {
                                Relevance::Relevant => positives.push(id.to_string()),
                                Relevance::WeaklyRelated => negatives.push(id.to_string()),
                            }
                        }
                        Ok(RerankerExample {
                            question_id: q.id.clone(),
                            question: q.question.clone(),
                            positives,
                            negatives,
                            prompt_version: version.clone(),
                        })
                    }
                    Err(f) => Err((f, q.id.clone())),
                })
            })
            .collect();

    let mut run = RerankerRun {
        records: Vec::new(),
        rejected: Vec::new(),
        transport_failures: 0,
        no_positive: 0,
    };
    for r in results {
        match r? {
            Ok(ex) if ex.positives.is_empty() => {
                log::info!(
                    "dropping `{}`: no candidate judged relevant",
                    ex.question_id
                );
                run.no_positive += 1;
                run.rejected.push(Rejection {
                    item: ex.question_id,
                    reason: "no candidate judged relevant".into(),
                    raw: None,
                });
            }
            Ok(ex) => run.records.push(ex),
            Err((f, id)) => {
                if f.transport {
                    run.transport_failures += 1;
                }
                log::warn!("labelling `{id}` failed: {}", f.message);
                run.rejected.push(Rejection {
                    item: id,
                    reason: f.message,
                    raw: f.raw,
                });
            }
        }
    }
    run.records
        .sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSample {
    pub question: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// One positive and `m` distinct negatives, sampled uniformly (seeded).
pub fn sample_loss_batch(example: &RerankerExample, m: usize, seed: u64) -> Result<LossSample> {
    if m == 0 {
        return Err(Error::Domain("need at least one negative".into()));
    }
    if example.positives.is_empty() {
        return Err(Error::Construction(format!(
            "example `{}` has no positive",
            example.question_id
        )));
    }
    if example.negatives.len() < m {
        return Err(Error::Construction(format!(
            "example `{}` has {} negatives, {m} requested",
            example.question_id,
            example.negatives.len()
        )));
    }
    let mut rng = seeded(seed, 1);
    let positive = example
        .positives
        .choose(&mut rng)
        .expect("non-empty")
        .clone();
    let mut negatives = example.negatives.clone();
    negatives.shuffle(&mut rng);
    negatives.truncate(m);
    Ok(LossSample {
        question: example.question.clone(),
        positive,
        negatives,
    })
}

impl LossSample {
    /// Scores the sample with `backend` and packs an Eq.-5-style batch.
    pub fn score(
        &self,
        backend: &dyn RerankBackend,
        text_of: impl Fn(&str) -> String,
        tau: f64,
    ) -> Result<RerankBatch> {
        let ids: Vec<&String> = std::iter::once(&self.positive)
            .chain(&self.negatives)
            .collect();
        let cands: Vec<RankedCandidate> = ids
            .iter()
            .map(|id| RankedCandidate {
                chunk_id: (*id).clone(),
                lexical_rank: None,
                semantic_rank: None,
                lexical_score: None,
                semantic_score: None,
                rrf_score: 0.0,
                rerank_score: None,
            })
            .collect();
        let texts: Vec<String> = ids.iter().map(|id| text_of(id)).collect();
        let inputs: Vec<RerankInput<'_>> = cands
            .iter()
            .zip(&texts)
            .map(|(c, t)| RerankInput {
                candidate: c,
                text: t,
            })
            .collect();
        let scores = backend.score(&self.question, &inputs)?;
        if scores.len() != inputs.len() {
            return Err(Error::ProviderContract(
                "reranker returned the wrong number of scores".into(),
            ));
        }
        RerankBatch::new(scores[0], scores[1..].to_vec(), tau)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTriplet {
    pub id: String,
    pub question: String,
    pub reference_chunk_ids: Vec<String>,
    pub answer: String,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruct {
    pub question: String,
    pub reference_chunk_ids: Vec<String>,
    pub answer: String,
}

/// Parses and validates `{"selected_chunk_ids", "question", "answer"}`
/// against the sampled pool.
pub fn parse_instruct_response(
    raw: &str,
    pool: &[&str],
) -> std::result::Result<ParsedInstruct, String> {
    let v = json_object(raw)?;
    let text = |k: &str| {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .ok_or_else(|| format!("`{k}` must be a non-empty string"))
    };
    let question = text("question")?;
    let answer = text("answer")?;
    let ids = v
        .get("selected_chunk_ids")
        .or_else(|| v.get("reference_chunk_ids"))
        .and_then(Value::as_array)
        .ok_or("`selected_chunk_ids` must be an array")?;
    let mut seen = BTreeSet::new();
    let mut refs = Vec::new();
    for id in ids {
        let id = id.as_str().ok_or("chunk ids must be strings")?;
        if !pool.contains(&id) {
            return Err(format!("chunk `{id}` is not in the sampled pool"));
        }
        if !seen.insert(id) {
            return Err(format!("chunk `{id}` selected twice"));
        }
        refs.push(id.to_string());
    }
    if refs.is_empty() {
        return Err("no chunk selected".into());
    }
    Ok(ParsedInstruct {
        question,
        reference_chunk_ids: refs,
        answer,
    })
}

/// `rounds` times: sample `pool_size` chunks, ask the model to pick related
/// ones and write a question and answer about them. Invalid replies are
/// re-asked up to `max_reasks` times, then dropped.
pub fn build_instruction_dataset(
    chunks: &[Chunk],
    client: &dyn ChatClient,
    rounds: usize,
    pool_size: usize,
    max_reasks: usize,
    seed: u64,
) -> Result<BuildReport<InstructionTriplet>> {
    if pool_size == 0 || chunks.len() < pool_size {
        return Err(Error::Construction(format!(
            "cannot sample pools of {pool_size} from {} chunks",
            chunks.len()
        )));
    }
    let prompt = prompts::instruct();
    let retry = prompts::instruct_retry();
    let version = prompt.version.clone();
    let width = rounds.to_string().len();
    let results: Vec<std::result::Result<InstructionTriplet, Rejection>> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let mut rng = seeded(seed, round as u64);
            let mut pool: Vec<&Chunk> = chunks.choose_multiple(&mut rng, pool_size).collect();
            pool.sort_by(|a, b| a.id.cmp(&b.id));
            let ids: Vec<&str> = pool.iter().map(|c| c.id.as_str()).collect();
            let listing: String = pool
                .iter()
                .map(|c| format!("[{}]\n{}\n\n", c.id, c.text))
                .collect();
            let size = pool_size.to_string();
            let base = prompt.render(
                &[("pool_size", &size), ("chunks", listing.trim_end())],
                format!("instruct:{round}"),
            );
            let item = format!("round {round}");
            let mut current = base.clone();
            let mut last_err = String::new();
            let mut last_raw = None;
            for attempt in 0..=max_reasks {
                let raw = match ask(client, &current) {
                    Ok(r) => r,
                    Err(e) => {
                        return Err(Rejection {
                            item,
                            reason: e.to_string(),
                            raw: None,
                        })
                    }
                };
                match parse_instruct_response(&raw, &ids) {
                    Ok(p) => {
                        return Ok(InstructionTriplet {
                            id: format!("instruct-{round:0width$}"),
                            question: p.question,
                            reference_chunk_ids: p.reference_chunk_ids,
                            answer: p.answer,
                            prompt_version: if attempt == 0 {
                                version.clone()
                            } else {
                                format!("{version}+{}", retry.version)
                            },
                        })
                    }
                    Err(e) => {
                        log::debug!("round {round} attempt {attempt}: {e}");
                        let follow = retry.render(&[("error", &e), ("previous", &raw)], "");
                        current = RenderedPrompt::new(
                            base.system.clone(),
                            format!("{}\n\n{}", base.user, follow.user),
                            format!("instruct:{round}:retry{}", attempt + 1),
                        );
                        last_err = e;
                        last_raw = Some(raw);
                    }
                }
            }
            Err(Rejection {
                item,
                reason: format!("invalid after {} attempt(s): {last_err}", max_reasks + 1),
                raw: last_raw,
            })
        })
        .collect();
    Ok(split_results(results))
}

/// Writes one JSON object per line, atomically.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.write_all(b"\n").expect("vec write");
    }
    write_atomic(path, &buf)
}
