//! Remote clients against an in-process transport double.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use docqa::error::TransportError;
use docqa::generation::{generate_answer, ChatClient, OpenAiChatClient, RenderedPrompt};
use docqa::http::{Endpoint, RetryPolicy, Transport};
use docqa::metrics::{judge_consistency, JudgeOutcome, RemoteJudge};
use docqa::retrieval::{RankedCandidate, RemoteCrossEncoder, RerankBackend, RerankInput};
use docqa::vector::{embed_batch, EmbeddingProvider, RemoteEmbedder};
use docqa::Error;

type Responder = dyn Fn(usize, &str, &Value) -> Result<Value, TransportError> + Send + Sync;

struct Mock {
    calls: AtomicUsize,
    seen: Mutex<Vec<(String, Value, Option<String>)>>,
    respond: Box<Responder>,
}

impl Mock {
    fn new(
        f: impl Fn(usize, &str, &Value) -> Result<Value, TransportError> + Send + Sync + 'static,
    ) -> Arc<Self> {
        Arc::new(Self {
            calls: AtomicUsize::new(0),
            seen: Mutex::new(Vec::new()),
            respond: Box::new(f),
        })
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for Mock {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> Result<Value, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen
            .lock()
            .unwrap()
            .push((url.to_string(), body.clone(), bearer.map(String::from)));
        (self.respond)(n, url, body)
    }
}

fn unavailable() -> TransportError {
    TransportError {
        message: "HTTP 503".into(),
        retryable: true,
        status: Some(503),
    }
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        backoff_ms: 0,
    }
}

fn chat_reply(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}], "model": "m"})
}

fn prompt() -> RenderedPrompt {
    RenderedPrompt::new("system", "user", "key")
}

#[test]
fn chat_client_sends_openai_shape_with_zero_temperature() {
    let mock = Mock::new(|_, _, _| Ok(chat_reply("routed")));
    let client = OpenAiChatClient::new(Endpoint::new("http://llm.local/"), "gpt", mock.clone());
    let out = generate_answer(&client, &prompt()).unwrap();
    assert_eq!(out.answer_text, "routed");
    let seen = mock.seen.lock().unwrap();
    let (url, body, bearer) = &seen[0];
    assert_eq!(url, "http://llm.local/v1/chat/completions");
    assert_eq!(body["model"], "gpt");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "user");
    assert!(bearer.is_none());
}

#[test]
fn retries_are_bounded_and_counted() {
    let mock = Mock::new(|_, _, _| Err(unavailable()));
    let mut client = OpenAiChatClient::new(Endpoint::new("http://llm.local"), "gpt", mock.clone());
    client.retry = fast();
    let err = client.complete(&prompt()).unwrap_err();
    assert_eq!(mock.calls(), 3);
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
}

#[test]
fn transient_failure_then_success() {
    let mock = Mock::new(|n, _, _| {
        if n == 0 {
            Err(unavailable())
        } else {
            Ok(chat_reply("ok"))
        }
    });
    let mut client = OpenAiChatClient::new(Endpoint::new("http://llm.local"), "gpt", mock.clone());
    client.retry = fast();
    assert_eq!(client.complete(&prompt()).unwrap().answer_text, "ok");
    assert_eq!(mock.calls(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = Mock::new(|_, _, _| {
        Err(TransportError {
            message: "HTTP 400".into(),
            retryable: false,
            status: Some(400),
        })
    });
    let mut client = OpenAiChatClient::new(Endpoint::new("http://llm.local"), "gpt", mock.clone());
    client.retry = fast();
    assert!(client.complete(&prompt()).is_err());
    assert_eq!(mock.calls(), 1);
}

#[test]
fn empty_completion_is_an_error() {
    let mock = Mock::new(|_, _, _| Ok(chat_reply("   ")));
    let client = OpenAiChatClient::new(Endpoint::new("http://llm.local"), "gpt", mock);
    assert!(generate_answer(&client, &prompt()).is_err());
}

#[test]
fn api_key_comes_from_the_named_variable() {
    std::env::set_var("DOCQA_TEST_REMOTE_KEY", "sekrit");
    let mock = Mock::new(|_, _, _| Ok(chat_reply("x")));
    let endpoint = Endpoint {
        base_url: "http://llm.local".into(),
        api_key_env: Some("DOCQA_TEST_REMOTE_KEY".into()),
    };
    OpenAiChatClient::new(endpoint, "gpt", mock.clone())
        .complete(&prompt())
        .unwrap();
    assert_eq!(mock.seen.lock().unwrap()[0].2.as_deref(), Some("sekrit"));
}

#[test]
fn embedder_batches_and_restores_order() {
    let mock = Mock::new(|_, _, body| {
        let inputs = body["input"].as_array().unwrap();
        // answer in reverse order with explicit indexes
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f64, 1.0]}))
            .collect();
        Ok(json!({ "data": data }))
    });
    let mut e = RemoteEmbedder::new(Endpoint::new("http://emb.local"), "bge", 2, mock.clone());
    e.batch_size = 2;
    e.retry = fast();
    let texts: Vec<String> = ["a", "bb", "ccc", "dddd", "eeeee"]
        .map(String::from)
        .to_vec();
    let out = e.embed(&texts).unwrap();
    assert_eq!(mock.calls(), 3);
    let lens: Vec<f64> = out.iter().map(|v| v.as_slice()[0]).collect();
    assert_eq!(lens, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(mock
        .seen
        .lock()
        .unwrap()
        .iter()
        .all(|(u, _, _)| u == "http://emb.local/v1/embeddings"));
}

#[test]
fn embedder_rejects_wrong_dimension() {
    let mock =
        Mock::new(|_, _, _| Ok(json!({"data": [{"index": 0, "embedding": [1.0, 2.0, 3.0]}]})));
    let e = RemoteEmbedder::new(Endpoint::new("http://emb.local"), "bge", 2, mock);
    assert!(embed_batch(&e, &["x".to_string()]).is_err());
}

#[test]
fn cross_encoder_scores_in_pool_order() {
    let mock = Mock::new(|_, _, body| {
        let docs = body["documents"].as_array().unwrap();
        let results: Vec<Value> = (0..docs.len())
            .rev()
            .map(|i| json!({"index": i, "relevance_score": i as f64 / 10.0}))
            .collect();
        Ok(json!({ "results": results }))
    });
    let mut ce = RemoteCrossEncoder::new(Endpoint::new("http://rr.local"), "bce", mock.clone());
    ce.retry = fast();
    let cands: Vec<RankedCandidate> = (0..3)
        .map(|i| RankedCandidate {
            chunk_id: format!("c{i}"),
            lexical_rank: Some(i + 1),
            semantic_rank: None,
            lexical_score: None,
            semantic_score: None,
            rrf_score: 0.0,
            rerank_score: None,
        })
        .collect();
    let texts = ["one", "two", "three"];
    let inputs: Vec<RerankInput> = cands
        .iter()
        .zip(texts)
        .map(|(candidate, text)| RerankInput { candidate, text })
        .collect();
    let scores = ce.score("q", &inputs).unwrap();
    assert_eq!(scores, vec![0.0, 0.1, 0.2]);
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].0, "http://rr.local/v1/rerank");
    assert_eq!(seen[0].1["query"], "q");
}

#[test]
fn judge_failures_are_unavailable_not_zero() {
    let mock = Mock::new(|_, _, _| Err(unavailable()));
    let mut judge = RemoteJudge::new(
        Endpoint::new("http://judge.local"),
        "gpt4-judge",
        mock.clone(),
    );
    judge.retry = fast();
    match judge_consistency(&judge, "q", "a", "r") {
        JudgeOutcome::Unavailable { reason } => assert!(reason.contains("503"), "{reason}"),
        other => panic!("expected unavailable, got {other:?}"),
    }
    assert_eq!(mock.calls(), 3);

    let mock = Mock::new(|_, _, _| Ok(json!({"consistency": 1.7})));
    let judge = RemoteJudge::new(Endpoint::new("http://judge.local"), "j", mock);
    assert!(judge_consistency(&judge, "q", "a", "r").value().is_none());

    let mock = Mock::new(|_, url, body| {
        assert_eq!(url, "http://judge.local/judge");
        assert_eq!(body["reference"], "r");
        Ok(json!({"consistency": 0.75}))
    });
    let judge = RemoteJudge::new(Endpoint::new("http://judge.local"), "j", mock);
    assert_eq!(judge_consistency(&judge, "q", "a", "r").value(), Some(0.75));
}

/// Talks to a real OpenAI-compatible endpoint when `DOCQA_LIVE_BASE_URL` is set.
#[test]
fn live_chat_smoke() {
    let Ok(base) = std::env::var("DOCQA_LIVE_BASE_URL") else {
        eprintln!("DOCQA_LIVE_BASE_URL not set; skipping");
        return;
    };
    let model = std::env::var("DOCQA_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());
    let endpoint = Endpoint {
        base_url: base,
        api_key_env: Some("DOCQA_LIVE_API_KEY".into()),
    };
    let transport = Arc::new(docqa::http::HttpTransport::new(
        std::time::Duration::from_secs(60),
    ));
    let client = OpenAiChatClient::new(endpoint, model, transport);
    let out = generate_answer(
        &client,
        &RenderedPrompt::new("Answer in one word.", "Say ok.", ""),
    )
    .unwrap();
    assert!(!out.answer_text.is_empty());
}
