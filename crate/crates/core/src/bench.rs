//! Benchmark harness: QA datasets, stage-wise and end-to-end evaluation,
//! per-category aggregation and report rendering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{PipelineConfig, QueryOverrides};
use crate::corpus::{write_atomic, Chunk};
use crate::error::{Error, Result};
use crate::metrics::{bleu_text, judge_consistency, recall_at_k, rouge_l_text, JudgeOutcome};
use crate::pipeline::{Pipeline, QueryStatus, StageTimings};
use crate::retrieval::CannedRerank;
use crate::tokenize::tokenize;

pub const RETRIEVAL_K: [usize; 4] = [5, 10, 15, 20];
pub const RERANK_K: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Functionality,
    VlsiFlow,
    Gui,
    InstallationTest,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Functionality,
        Category::VlsiFlow,
        Category::Gui,
        Category::InstallationTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Functionality => "functionality",
            Category::VlsiFlow => "vlsi-flow",
            Category::Gui => "gui",
            Category::InstallationTest => "installation-test",
        }
    }

    /// GUI and installation & test questions are few, so they are
    /// reported together.
    pub fn group(self) -> ReportGroup {
        match self {
            Category::Functionality => ReportGroup::Functionality,
            Category::VlsiFlow => ReportGroup::VlsiFlow,
            Category::Gui | Category::InstallationTest => ReportGroup::GuiInstallTest,
        }
    }

    /// Lenient matching for upstream spellings ("VLSI flow", "Installation & Test", ...).
    pub fn parse_loose(s: &str) -> Option<Self> {
        let k: String = s
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .collect();
        if k.is_empty() {
            return None;
        }
        Some(if k.contains("function") {
            Category::Functionality
        } else if k.contains("vlsi") || k.contains("flow") {
            Category::VlsiFlow
        } else if k.contains("gui") || k.contains("graphical") {
            Category::Gui
        } else if k.contains("install") || k.contains("test") || k.contains("build") {
            Category::InstallationTest
        } else {
            return None;
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportGroup {
    Functionality,
    VlsiFlow,
    GuiInstallTest,
}

impl ReportGroup {
    pub const ALL: [ReportGroup; 3] = [
        ReportGroup::Functionality,
        ReportGroup::VlsiFlow,
        ReportGroup::GuiInstallTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportGroup::Functionality => "functionality",
            ReportGroup::VlsiFlow => "vlsi-flow",
            ReportGroup::GuiInstallTest => "gui-install-test",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ReportGroup::Functionality => "Functionality",
            ReportGroup::VlsiFlow => "VLSI-flow",
            ReportGroup::GuiInstallTest => "GUI & Install & Test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub category: Category,
    pub reference_chunk_ids: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<QaRecord>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.category).or_insert(0) += 1;
        }
        m
    }

    pub fn group_counts(&self) -> BTreeMap<ReportGroup, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.category.group()).or_insert(0) += 1;
        }
        m
    }

    /// Every reference id must name a chunk; the error lists offenders by record.
    pub fn check_references(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        let bad: Vec<String> = self
            .records
            .iter()
            .filter_map(|r| {
                let missing: Vec<&str> = r
                    .reference_chunk_ids
                    .iter()
                    .map(String::as_str)
                    .filter(|id| !known(id))
                    .collect();
                (!missing.is_empty()).then(|| format!("{}: {}", r.id, missing.join(", ")))
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "unresolvable reference chunks: {}",
                bad.join("; ")
            )))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}

fn validate_record(r: &QaRecord) -> std::result::Result<(), String> {
    if r.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if r.question.trim().is_empty() {
        return Err("empty question".into());
    }
    if r.answer.trim().is_empty() {
        return Err("empty answer".into());
    }
    if r.reference_chunk_ids.is_empty() {
        return Err("no reference chunks".into());
    }
    Ok(())
}

/// Parses the dataset schema: a JSON array of
/// `{id, question, category, reference_chunk_ids, answer}`. Every
/// offending record is listed in the error.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Dataset {
            records: Vec::new(),
            warnings: vec!["dataset is empty".into()],
        });
    }
    let items: Vec<Value> = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("dataset must be a JSON array of records: {e}"),
    })?;
    let mut records = Vec::with_capacity(items.len());
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (i, v) in items.into_iter().enumerate() {
        let label = v
            .get("id")
            .and_then(Value::as_str)
            .map_or_else(|| format!("#{}", i + 1), |s| s.to_string());
        match serde_json::from_value::<QaRecord>(v) {
            Ok(r) => match validate_record(&r) {
                Ok(()) if !seen.insert(r.id.clone()) => {
                    problems.push(format!("{label}: duplicate id"))
                }
                Ok(()) => records.push(r),
                Err(e) => problems.push(format!("{label}: {e}")),
            },
            Err(e) => problems.push(format!("{label}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Invalid(format!(
            "invalid dataset records: {}",
            problems.join("; ")
        )));
    }
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push("dataset is empty".into());
    }
    Ok(Dataset { records, warnings })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut d = parse_dataset(&bytes)?;
    for w in &d.warnings {
        log::warn!("{}: {w}", path.display());
    }
    d.warnings
        .iter_mut()
        .for_each(|w| *w = format!("{}: {w}", path.display()));
    Ok(d)
}

const ID_KEYS: &[&str] = &["id", "qid", "question_id", "idx", "index"];
const QUESTION_KEYS: &[&str] = &["question", "query", "q"];
const ANSWER_KEYS: &[&str] = &[
    "answer",
    "ground_truth",
    "gt_answer",
    "reference_answer",
    "a",
];
const CATEGORY_KEYS: &[&str] = &["category", "type", "question_type", "class", "label"];
const REFERENCE_KEYS: &[&str] = &[
    "reference_chunk_ids",
    "references",
    "reference",
    "reference_content",
    "reference_docs",
    "documents",
    "docs",
    "golden_docs",
    "context",
];

fn field<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| {
        obj.get(*k).or_else(|| {
            obj.iter()
                .find(|(name, _)| name.eq_ignore_ascii_case(k))
                .map(|(_, v)| v)
        })
    })
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// A reference as found upstream: a chunk id, a source path, or chunk text.
fn reference_strings(v: &Value) -> Vec<String> {
    match v {
        Value::String(s) => vec![s.clone()],
        Value::Array(items) => items.iter().flat_map(reference_strings).collect(),
        Value::Object(o) => [
            "id",
            "chunk_id",
            "text",
            "content",
            "page_content",
            "source",
            "path",
        ]
        .iter()
        .find_map(|k| o.get(*k).and_then(scalar_text))
        .into_iter()
        .collect(),
        _ => Vec::new(),
    }
}

fn normalize(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Maps upstream reference strings onto chunk ids.
struct ReferenceResolver<'a> {
    chunks: &'a [Chunk],
    ids: HashSet<&'a str>,
    normalized: Vec<String>,
}

impl<'a> ReferenceResolver<'a> {
    fn new(chunks: &'a [Chunk]) -> Self {
        Self {
            chunks,
            ids: chunks.iter().map(|c| c.id.as_str()).collect(),
            normalized: chunks.iter().map(|c| normalize(&c.text)).collect(),
        }
    }

    fn resolve(&self, reference: &str) -> Option<String> {
        let r = reference.trim();
        if self.ids.contains(r) {
            return Some(r.to_string());
        }
        if r.contains('#') {
            let hits: Vec<&Chunk> = self.chunks.iter().filter(|c| c.id.ends_with(r)).collect();
            if hits.len() == 1 {
                return Some(hits[0].id.clone());
            }
        }
        let needle = normalize(r);
        if needle.is_empty() {
            return None;
        }
        // Containment either way, then best token-set overlap.
        let contained: Vec<usize> = (0..self.chunks.len())
            .filter(|&i| {
                self.normalized[i].contains(&needle)
                    || (!self.normalized[i].is_empty() && needle.contains(&self.normalized[i]))
            })
            .collect();
        let candidates: Vec<usize> = if contained.is_empty() {
            (0..self.chunks.len()).collect()
        } else {
            contained.clone()
        };
        let q: BTreeSet<&str> = needle.split(' ').collect();
        let mut best: Option<(f64, usize)> = None;
        for i in candidates {
            let d: BTreeSet<&str> = self.normalized[i].split(' ').collect();
            let inter = q.intersection(&d).count() as f64;
            let union = q.union(&d).count() as f64;
            let j = if union > 0.0 { inter / union } else { 0.0 };
            if best.is_none_or(|(b, _)| j > b) {
                best = Some((j, i));
            }
        }
        let (score, i) = best?;
        (!contained.is_empty() || score >= 0.5).then(|| self.chunks[i].id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Reads upstream-format QA data (a JSON array, an object wrapping one,
/// or JSON lines) with common field spellings, and maps references onto
/// `chunks` when given (otherwise references are taken as chunk ids).
pub fn import_ordqa(bytes: &[u8], chunks: Option<&[Chunk]>) -> Result<ImportReport> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("input is not UTF-8: {e}"),
    })?;
    let items: Vec<Value> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(a)) => a,
        Ok(Value::Object(o)) => match ["data", "records", "questions", "items"]
            .iter()
            .find_map(|k| o.get(*k))
        {
            Some(Value::Array(a)) => a.clone(),
            _ => vec![Value::Object(o)],
        },
        Ok(_) => return Err(Error::Invalid("expected a JSON array or object".into())),
        Err(_) => {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?);
            }
            out
        }
    };

    let resolver = chunks.map(ReferenceResolver::new);
    let mut warnings = Vec::new();
    let mut problems = Vec::new();
    let mut records = Vec::with_capacity(items.len());
    let mut seen = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let Some(obj) = item.as_object() else {
            problems.push(format!("#{}: not an object", i + 1));
            continue;
        };
        let id = field(obj, ID_KEYS)
            .and_then(scalar_text)
            .unwrap_or_else(|| format!("ordqa-{:03}", i + 1));
        let get = |keys: &[&str]| {
            field(obj, keys)
                .and_then(scalar_text)
                .map(|s| s.trim().to_string())
        };
        let (Some(question), Some(answer)) = (get(QUESTION_KEYS), get(ANSWER_KEYS)) else {
            problems.push(format!("{id}: missing question or answer"));
            continue;
        };
        let raw_cat = get(CATEGORY_KEYS).unwrap_or_default();
        let Some(category) = Category::parse_loose(&raw_cat) else {
            problems.push(format!("{id}: unknown category `{raw_cat}`"));
            continue;
        };
        let refs = field(obj, REFERENCE_KEYS)
            .map(reference_strings)
            .unwrap_or_default();
        let mut ids = Vec::new();
        for r in &refs {
            let resolved = match &resolver {
                Some(res) => res.resolve(r),
                None => Some(r.trim().to_string()),
            };
            match resolved {
                Some(x) if !ids.contains(&x) => ids.push(x),
                Some(_) => {}
                None => problems.push(format!("{id}: reference `{}` matches no chunk", preview(r))),
            }
        }
        let rec = QaRecord {
            id: id.clone(),
            question,
            category,
            reference_chunk_ids: ids,
            answer,
        };
        if let Err(e) = validate_record(&rec) {
            problems.push(format!("{id}: {e}"));
        } else if !seen.insert(id.clone()) {
            problems.push(format!("{id}: duplicate id"));
        } else {
            records.push(rec);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Invalid(format!(
            "import failed: {}",
            problems.join("; ")
        )));
    }
    if records.is_empty() {
        warnings.push("imported dataset is empty".into());
    }
    Ok(ImportReport {
        dataset: Dataset {
            records,
            warnings: warnings.clone(),
        },
        warnings,
    })
}

fn preview(s: &str) -> String {
    let t: String = s.chars().take(60).collect();
    if t.len() < s.len() {
        format!("{t}…")
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Retrieval,
    Rerank,
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub category: Category,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    /// Records contributing to the mean.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub name: String,
    pub records: usize,
    pub failed: usize,
    pub metrics: BTreeMap<String, MetricAggregate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub name: String,
    pub scored: usize,
    pub attempted: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub k_values: Vec<usize>,
    pub records: Vec<RecordResult>,
    pub categories: Vec<GroupAggregate>,
    pub groups: Vec<GroupAggregate>,
    pub overall: GroupAggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeSummary>,
    #[serde(default)]
    pub timings: BTreeMap<String, TimingStat>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Means over successful records that carry each metric.
pub fn aggregate<'a>(
    name: &str,
    records: impl IntoIterator<Item = &'a RecordResult>,
) -> GroupAggregate {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let (mut n, mut failed) = (0, 0);
    for r in records {
        n += 1;
        if r.status == RecordStatus::Failed {
            failed += 1;
            continue;
        }
        for (k, v) in &r.metrics {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    GroupAggregate {
        name: name.into(),
        records: n,
        failed,
        metrics: sums
            .into_iter()
            .map(|(k, (s, c))| {
                (
                    k,
                    MetricAggregate {
                        mean: s / c as f64,
                        count: c,
                    },
                )
            })
            .collect(),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn timing_stats(records: &[RecordResult]) -> BTreeMap<String, TimingStat> {
    let mut out = BTreeMap::new();
    for stage in StageTimings::STAGES {
        let mut xs: Vec<f64> = records
            .iter()
            .filter(|r| r.status == RecordStatus::Ok)
            .filter_map(|r| r.timings.and_then(|t| t.get(stage)))
            .collect();
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        out.insert(
            stage.to_string(),
            TimingStat {
                mean_ms: xs.iter().sum::<f64>() / xs.len() as f64,
                median_ms: median(&xs),
                count: xs.len(),
            },
        );
    }
    out
}

impl EvalReport {
    /// Builds aggregates from per-record results (sorted by id first).
    pub fn assemble(
        kind: ReportKind,
        config: &PipelineConfig,
        k_values: Vec<usize>,
        mut records: Vec<RecordResult>,
    ) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let categories = Category::ALL
            .iter()
            .filter(|c| records.iter().any(|r| r.category == **c))
            .map(|c| aggregate(c.as_str(), records.iter().filter(|r| r.category == *c)))
            .collect();
        let groups = ReportGroup::ALL
            .iter()
            .map(|g| {
                aggregate(
                    g.as_str(),
                    records.iter().filter(|r| r.category.group() == *g),
                )
            })
            .collect();
        let overall = aggregate("all", &records);
        Self {
            kind,
            config_hash: config.hash(),
            config: config.clone(),
            k_values,
            timings: timing_stats(&records),
            records,
            categories,
            groups,
            overall,
            judge: None,
            warnings: Vec::new(),
        }
    }

    pub fn metric_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn aggregate_rows(&self) -> usize {
        self.categories.len() + self.groups.len() + 1
    }
}

fn run_records<T: Send>(
    workers: usize,
    dataset: &Dataset,
    f: impl Fn(&QaRecord) -> T + Sync + Send,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| dataset.records.par_iter().map(f).collect()))
}

fn relevant(r: &QaRecord) -> HashSet<String> {
    r.reference_chunk_ids.iter().cloned().collect()
}

fn failed(r: &QaRecord, e: &Error) -> RecordResult {
    failed_with(r, e.to_string())
}

fn failed_with(r: &QaRecord, message: String) -> RecordResult {
    RecordResult {
        id: r.id.clone(),
        category: r.category,
        status: RecordStatus::Failed,
        error: Some(message),
        metrics: BTreeMap::new(),
        judge: None,
        answer: None,
        timings: None,
    }
}

/// recall@k for lexical-only, semantic-only and hybrid (RRF order)
/// retrieval. Single-searcher depth is the largest k; the hybrid pool uses
/// the configured depths.
pub fn eval_retrieval(
    pipeline: &Pipeline,
    dataset: &Dataset,
    k_values: &[usize],
) -> Result<EvalReport> {
    let cfg = pipeline.config();
    let kmax = k_values
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Invalid("no k values".into()))?;
    if k_values.contains(&0) {
        return Err(Error::Invalid("k values must be at least 1".into()));
    }
    let retriever = pipeline.retriever(cfg);
    let records = run_records(cfg.workers, dataset, |r| {
        let eval = || -> Result<BTreeMap<String, f64>> {
            let rel = relevant(r);
            let lex: Vec<String> = retriever
                .lexical(&r.question, kmax)
                .into_iter()
                .map(|h| h.chunk_id)
                .collect();
            let sem: Vec<String> = retriever
                .semantic(&r.question, kmax)?
                .into_iter()
                .map(|h| h.chunk_id)
                .collect();
            let hyb: Vec<String> = pipeline
                .fused_pool(&r.question, cfg)?
                .into_iter()
                .map(|c| c.chunk_id)
                .collect();
            let mut m = BTreeMap::new();
            for &k in k_values {
                m.insert(format!("lexical/recall@{k}"), recall_at_k(&rel, &lex, k)?);
                m.insert(format!("semantic/recall@{k}"), recall_at_k(&rel, &sem, k)?);
                m.insert(format!("hybrid/recall@{k}"), recall_at_k(&rel, &hyb, k)?);
            }
            Ok(m)
        };
        match eval() {
            Ok(metrics) => RecordResult {
                id: r.id.clone(),
                category: r.category,
                status: RecordStatus::Ok,
                error: None,
                metrics,
                judge: None,
                answer: None,
                timings: None,
            },
            Err(e) => failed(r, &e),
        }
    })?;
    Ok(EvalReport::assemble(
        ReportKind::Retrieval,
        cfg,
        k_values.to_vec(),
        records,
    ))
}

/// Reranker that scores exactly the reference chunks of each question 1.
pub fn oracle_reranker(dataset: &Dataset) -> CannedRerank {
    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &dataset.records {
        let t = scores.entry(r.question.clone()).or_default();
        for id in &r.reference_chunk_ids {
            t.insert(id.clone(), 1.0);
        }
    }
    CannedRerank {
        scores,
        default_score: 0.0,
    }
}

/// recall@k after reranking the hybrid pool with the named backend.
pub fn eval_rerank(
    pipeline: &Pipeline,
    dataset: &Dataset,
    backend: &str,
    k_values: &[usize],
) -> Result<EvalReport> {
    let cfg = pipeline.config();
    let kmax = k_values
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Invalid("no k values".into()))?;
    if k_values.contains(&0) {
        return Err(Error::Invalid("k values must be at least 1".into()));
    }
    pipeline.reranker(backend)?;
    let results = run_records(cfg.workers, dataset, |r| {
        let eval = || -> Result<(BTreeMap<String, f64>, bool)> {
            let rel = relevant(r);
            let pool = pipeline.fused_pool(&r.question, cfg)?;
            let (ids, fell_back) = if pool.is_empty() {
                (Vec::new(), false)
            } else {
                let o = pipeline.rerank_with(
                    backend,
                    &r.question,
                    &pool,
                    kmax,
                    cfg.rerank.fallback_to_rrf,
                )?;
                (
                    o.candidates
                        .into_iter()
                        .map(|c| c.chunk_id)
                        .collect::<Vec<_>>(),
                    o.fell_back,
                )
            };
            let mut m = BTreeMap::new();
            for &k in k_values {
                m.insert(format!("rerank/recall@{k}"), recall_at_k(&rel, &ids, k)?);
            }
            Ok((m, fell_back))
        };
        match eval() {
            Ok((metrics, fell_back)) => (
                RecordResult {
                    id: r.id.clone(),
                    category: r.category,
                    status: RecordStatus::Ok,
                    error: None,
                    metrics,
                    judge: None,
                    answer: None,
                    timings: None,
                },
                fell_back,
            ),
            Err(e) => (failed(r, &e), false),
        }
    })?;
    let fallbacks: Vec<String> = results
        .iter()
        .filter(|(_, f)| *f)
        .map(|(r, _)| r.id.clone())
        .collect();
    let mut cfg = cfg.clone();
    cfg.rerank.backend = backend.to_string();
    let mut report = EvalReport::assemble(
        ReportKind::Rerank,
        &cfg,
        k_values.to_vec(),
        results.into_iter().map(|(r, _)| r).collect(),
    );
    if !fallbacks.is_empty() {
        report.warnings.push(format!(
            "reranker `{backend}` unavailable for {}; RRF order used",
            fallbacks.join(", ")
        ));
    }
    Ok(report)
}

/// Full pipeline per record; BLEU / ROUGE-L (and the judge, when
/// configured) against the ground-truth answer. The first query is run
/// once beforehand as an untimed warm-up.
pub fn eval_end_to_end(pipeline: &Pipeline, dataset: &Dataset) -> Result<EvalReport> {
    let cfg = pipeline.config();
    let none = QueryOverrides::default();
    if cfg.record_timings {
        if let Some(first) = dataset.records.first() {
            let _ = pipeline.run_query(&first.question, &none);
        }
    }
    let judge = pipeline.judge();
    let records = run_records(cfg.workers, dataset, |r| {
        let resp = match pipeline.run_query(&r.question, &none) {
            Ok(x) => x,
            Err(e) => return failed(r, &e),
        };
        if resp.status == QueryStatus::Failed {
            let message = resp.error.as_ref().map_or_else(
                || "query failed".to_string(),
                |e| format!("{} stage: {}", e.stage.as_str(), e.message),
            );
            return failed_with(r, message);
        }
        let answer = resp.answer.clone().unwrap_or_default();
        let mut metrics = BTreeMap::new();
        let scores =
            bleu_text(&answer, &r.answer).and_then(|b| Ok((b, rouge_l_text(&answer, &r.answer)?)));
        match scores {
            Ok((b, l)) => {
                metrics.insert("bleu".into(), b.value);
                metrics.insert("rouge_l".into(), l.value);
            }
            Err(e) => return failed(r, &e),
        }
        let verdict = judge.map(|j| judge_consistency(j.as_ref(), &r.question, &answer, &r.answer));
        if let Some(v) = verdict.as_ref().and_then(JudgeOutcome::value) {
            metrics.insert("consistency".into(), v);
        }
        RecordResult {
            id: r.id.clone(),
            category: r.category,
            status: RecordStatus::Ok,
            error: None,
            metrics,
            judge: verdict,
            answer: Some(answer),
            timings: Some(resp.timings),
        }
    })?;
    let mut report = EvalReport::assemble(ReportKind::EndToEnd, cfg, Vec::new(), records);
    if let Some(j) = judge {
        let attempted = report.records.iter().filter(|r| r.judge.is_some()).count();
        let scored = report
            .records
            .iter()
            .filter(|r| r.judge.as_ref().and_then(JudgeOutcome::value).is_some())
            .count();
        report.judge = Some(JudgeSummary {
            name: j.name().to_string(),
            scored,
            attempted,
            coverage: if attempted == 0 {
                0.0
            } else {
                scored as f64 / attempted as f64
            },
        });
    }
    if report.overall.failed > 0 {
        report.warnings.push(format!(
            "{} record(s) failed and are excluded from the means",
            report.overall.failed
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            "md" | "markdown" => Some(Self::Markdown),
            _ => None,
        }
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    write_atomic(path, render_report(report, format).as_bytes())
}

pub fn parse_report(bytes: &[u8]) -> Result<EvalReport> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("report: {e}"),
    })
}

fn render_csv(report: &EvalReport) -> String {
    let metrics = report.metric_names();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row_type", "id", "category", "status", "records"];
    header.extend(metrics.iter().map(String::as_str));
    w.write_record(&header).expect("in-memory csv");
    for r in &report.records {
        let status = match r.status {
            RecordStatus::Ok => "ok",
            RecordStatus::Failed => "failed",
        };
        let mut row = vec![
            "record".to_string(),
            r.id.clone(),
            r.category.as_str().into(),
            status.into(),
            String::new(),
        ];
        row.extend(
            metrics
                .iter()
                .map(|m| r.metrics.get(m).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row).expect("in-memory csv");
    }
    let aggs = report
        .categories
        .iter()
        .map(|g| ("category", g))
        .chain(report.groups.iter().map(|g| ("group", g)))
        .chain(std::iter::once(("overall", &report.overall)));
    for (kind, g) in aggs {
        let mut row = vec![
            kind.to_string(),
            g.name.clone(),
            String::new(),
            String::new(),
            g.records.to_string(),
        ];
        row.extend(metrics.iter().map(|m| {
            g.metrics
                .get(m)
                .map(|a| a.mean.to_string())
                .unwrap_or_default()
        }));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn render_markdown(report: &EvalReport) -> String {
    let title = match report.kind {
        ReportKind::Retrieval => "Retrieval",
        ReportKind::Rerank => "Rerank",
        ReportKind::EndToEnd => "End-to-end",
    };
    let mut s = String::new();
    let _ = writeln!(s, "# {title} evaluation\n");
    let _ = writeln!(
        s,
        "- records: {} ({} failed)",
        report.overall.records, report.overall.failed
    );
    let _ = writeln!(s, "- config: `{}`", report.config_hash);
    if let Some(j) = &report.judge {
        let _ = writeln!(
            s,
            "- judge `{}` coverage: {}/{} ({:.3})",
            j.name, j.scored, j.attempted, j.coverage
        );
    }
    s.push('\n');
    let cols: Vec<&GroupAggregate> = report
        .groups
        .iter()
        .chain(std::iter::once(&report.overall))
        .collect();
    let titles: Vec<String> = ReportGroup::ALL
        .iter()
        .map(|g| g.title().to_string())
        .chain(std::iter::once("All".to_string()))
        .zip(&cols)
        .map(|(t, g)| format!("{t} (n={})", g.records))
        .collect();
    let _ = writeln!(s, "| metric | {} |", titles.join(" | "));
    let _ = writeln!(s, "|---|{}", "---:|".repeat(cols.len()));
    for m in report.metric_names() {
        let cells: Vec<String> = cols
            .iter()
            .map(|g| {
                g.metrics
                    .get(&m)
                    .map_or_else(|| "–".to_string(), |a| format!("{:.4}", a.mean))
            })
            .collect();
        let _ = writeln!(s, "| {m} | {} |", cells.join(" | "));
    }
    if !report.timings.is_empty() {
        s.push_str("\n| stage | mean ms | median ms |\n|---|---:|---:|\n");
        for (stage, t) in &report.timings {
            let _ = writeln!(s, "| {stage} | {:.2} | {:.2} |", t.mean_ms, t.median_ms);
        }
    }
    if !report.warnings.is_empty() {
        s.push('\n');
        for w in &report.warnings {
            let _ = writeln!(s, "> {w}");
        }
    }
    s
}
