//! Drives the `docqa` binary end to end on the fixture corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini")
}

fn datagen_fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/datagen")
}

fn docqa(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_docqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    out
}

fn ok(args: &[&str]) -> String {
    let out = docqa(args);
    assert!(
        out.status.success(),
        "docqa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Ingests and indexes the fixture docs into a fresh directory.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Self { dir };
        ok(&[
            "ingest",
            "--docs",
            &s(&fixture().join("docs")),
            "--out",
            &ws.path("chunks.jsonl"),
        ]);
        ok(&[
            "index",
            "--config",
            &s(&fixture().join("config.json")),
            "--chunks",
            &ws.path("chunks.jsonl"),
            "--out",
            &ws.path("index"),
        ]);
        ws
    }

    fn path(&self, name: &str) -> String {
        s(&self.dir.path().join(name))
    }

    fn cfg(&self) -> Vec<String> {
        vec![
            "--config".into(),
            s(&fixture().join("config.json")),
            "--chunks".into(),
            self.path("chunks.jsonl"),
            "--index-dir".into(),
            self.path("index"),
        ]
    }
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn with<'a>(head: &[&'a str], cfg: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter()
        .copied()
        .chain(cfg.iter().map(String::as_str))
        .chain(tail.iter().copied())
        .collect()
}

#[test]
fn ingest_and_index_write_their_artifacts() {
    let ws = Workspace::new();
    let chunks = std::fs::read_to_string(ws.path("chunks.jsonl")).unwrap();
    assert_eq!(chunks.lines().count(), 50);
    assert!(Path::new(&ws.path("index/lexical.json")).exists());
    assert!(Path::new(&ws.path("index/vectors.bin")).exists());
}

#[test]
fn query_subcommand_matches_the_http_payload() {
    let ws = Workspace::new();
    let cfg = ws.cfg();
    let q = "Explain the purpose of add_ruler.";
    let cli: Value = serde_json::from_str(&ok(&with(&["query"], &cfg, &["--compact", q]))).unwrap();

    let config = docqa::config::PipelineConfig {
        paths: docqa::config::Paths {
            chunks: Some(ws.path("chunks.jsonl").into()),
            index_dir: Some(ws.path("index").into()),
        },
        ..docqa::config::PipelineConfig::load(&fixture().join("config.json")).unwrap()
    };
    let p = docqa::pipeline::Pipeline::from_config(config).unwrap();
    let http = docqa_service::answer(
        &p,
        &docqa_service::QueryRequest {
            question: q.into(),
            overrides: Default::default(),
        },
    )
    .unwrap();
    assert_eq!(cli, serde_json::to_value(&http).unwrap());
    assert_eq!(cli["candidates"][0]["chunk_id"], "gui.md#add_ruler");

    let narrow: Value = serde_json::from_str(&ok(&with(
        &["query"],
        &cfg,
        &["--rerank-k", "1", "--lexical-engine", "tfidf", q],
    )))
    .unwrap();
    assert_eq!(narrow["candidates"].as_array().unwrap().len(), 1);
}

#[test]
fn bench_e2e_is_byte_identical_across_runs() {
    let ws = Workspace::new();
    let cfg = ws.cfg();
    let ds = s(&fixture().join("dataset.json"));
    for name in ["a.json", "b.json"] {
        ok(&with(
            &["bench", "e2e"],
            &cfg,
            &["--dataset", &ds, "--out", &ws.path(name)],
        ));
    }
    let a = std::fs::read(ws.path("a.json")).unwrap();
    let b = std::fs::read(ws.path("b.json")).unwrap();
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["overall"]["metrics"]["bleu"]["mean"], 1.0);
    assert_eq!(report["overall"]["metrics"]["rouge_l"]["mean"], 1.0);
}

#[test]
fn bench_retrieval_and_rerank_write_every_format() {
    let ws = Workspace::new();
    let cfg = ws.cfg();
    let ds = s(&fixture().join("dataset.json"));
    ok(&with(
        &["bench", "retrieval"],
        &cfg,
        &["--dataset", &ds, "--k", "5,10", "--out", &ws.path("r.md")],
    ));
    let md = std::fs::read_to_string(ws.path("r.md")).unwrap();
    assert!(md.contains("hybrid/recall@5"));
    assert!(md.contains("GUI & Install & Test (n=10)"));

    ok(&with(
        &["bench", "rerank"],
        &cfg,
        &[
            "--dataset",
            &ds,
            "--backend",
            "oracle",
            "--out",
            &ws.path("rr.csv"),
        ],
    ));
    let csv = std::fs::read_to_string(ws.path("rr.csv")).unwrap();
    let overall = csv.lines().find(|l| l.starts_with("overall,")).unwrap();
    assert!(overall.ends_with(",1,1,1,1,1"), "{overall}");

    let bad = docqa(&with(
        &["bench", "retrieval"],
        &cfg,
        &["--dataset", &ds, "--out", &ws.path("r.txt")],
    ));
    assert!(!bad.status.success());
}

#[test]
fn bench_import_converts_published_shape() {
    let ws = Workspace::new();
    let raw = serde_json::json!([
        {"question": "How do I place pins?", "answer": "Use place_pin.", "type": "Functionality",
         "reference": ["ppl.md#place_pin"]},
        {"question": "How do I install?", "answer": "Build from source.", "category": "installation & test",
         "reference": ["install.md#check_tool_version"]}
    ]);
    std::fs::write(ws.path("raw.json"), raw.to_string()).unwrap();
    ok(&[
        "bench",
        "import",
        "--input",
        &ws.path("raw.json"),
        "--chunks",
        &ws.path("chunks.jsonl"),
        "--out",
        &ws.path("ds.json"),
    ]);
    let ds = docqa::bench::load_dataset(Path::new(&ws.path("ds.json"))).unwrap();
    assert_eq!(ds.len(), 2);
}

#[test]
fn loss_eval_prints_loss_and_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("nll.json");
    std::fs::write(&input, r#"{"probs": [0.5, 0.25]}"#).unwrap();
    let out: Value = serde_json::from_str(&ok(&[
        "loss",
        "eval",
        "--kind",
        "nll",
        "--input",
        &s(&input),
    ]))
    .unwrap();
    assert!((out["loss"].as_f64().unwrap() - 2.079442).abs() < 1e-6);

    std::fs::write(
        &input,
        r#"{"sims_pos": [[1.0]], "sims_neg": [[0.0]], "tau": 1.0}"#,
    )
    .unwrap();
    let out: Value = serde_json::from_str(&ok(&[
        "loss",
        "eval",
        "--kind",
        "embedding",
        "--input",
        &s(&input),
    ]))
    .unwrap();
    assert!((out["loss"].as_f64().unwrap() - 0.313262).abs() < 1e-6);
    // d/ds+ = -(1 - sigmoid(1)), d/ds- = 1 - sigmoid(1)
    let g: Vec<f64> = out["gradient"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let want = 1.0 - 1.0 / (1.0 + (-1.0f64).exp());
    assert!(
        (g[0] + want).abs() < 1e-9 && (g[1] - want).abs() < 1e-9,
        "{g:?}"
    );

    std::fs::write(&input, r#"{"pos_score": 1.0, "neg_scores": []}"#).unwrap();
    assert!(
        !docqa(&["loss", "eval", "--kind", "reranker", "--input", &s(&input)])
            .status
            .success()
    );
}

#[test]
fn datagen_runs_offline_and_deterministically() {
    let ws = Workspace::new();
    let cfg = ws.cfg();
    let fx = s(&datagen_fixture());

    for name in ["t1.jsonl", "t2.jsonl"] {
        ok(&with(
            &["datagen", "triplets"],
            &cfg,
            &[
                "--limit",
                "2",
                "--seed",
                "5",
                "--fixture",
                &fx,
                "--out",
                &ws.path(name),
            ],
        ));
    }
    let t1 = std::fs::read_to_string(ws.path("t1.jsonl")).unwrap();
    assert_eq!(t1, std::fs::read_to_string(ws.path("t2.jsonl")).unwrap());
    assert_eq!(t1.lines().count(), 2);
    for line in t1.lines() {
        let t: Value = serde_json::from_str(line).unwrap();
        let term = t["terminology"].as_str().unwrap();
        assert!(t["query"].as_str().unwrap().contains(term));
        assert!(!t["negative"].as_str().unwrap().contains(term));
    }

    ok(&with(
        &["datagen", "reranker"],
        &cfg,
        &[
            "--questions",
            &s(&fixture().join("dataset.json")),
            "--labels",
            "reference",
            "--out",
            &ws.path("rr.jsonl"),
        ],
    ));
    let rr = std::fs::read_to_string(ws.path("rr.jsonl")).unwrap();
    assert_eq!(rr.lines().count(), 50);
    let first: Value = serde_json::from_str(rr.lines().next().unwrap()).unwrap();
    assert_eq!(
        first["positives"],
        serde_json::json!(["ifp.md#initialize_floorplan"])
    );

    ok(&with(
        &["datagen", "instruct"],
        &cfg,
        &[
            "--rounds",
            "2",
            "--pool-size",
            "50",
            "--seed",
            "1",
            "--fixture",
            &fx,
            "--out",
            &ws.path("in.jsonl"),
        ],
    ));
    let lines: Vec<Value> = std::fs::read_to_string(ws.path("in.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[1]["reference_chunk_ids"],
        serde_json::json!(["cts.md#clock_tree_synthesis"])
    );
    assert!(lines[1]["prompt_version"].as_str().unwrap().contains('+'));
}

#[test]
fn helpful_errors_for_missing_inputs() {
    let out = docqa(&["query", "anything"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = docqa(&[
        "ingest",
        "--docs",
        "/nonexistent/dir",
        "--out",
        "/tmp/x.jsonl",
    ]);
    assert!(!out.status.success());
}
