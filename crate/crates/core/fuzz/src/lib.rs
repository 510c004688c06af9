//! Fuzz target bodies, shared with the seed replay test.

use docqa::corpus::{self, Document};
use docqa::datagen::{parse_instruct_response, parse_label_response, PromptAsset, TermList};
use docqa::lexical::{Bm25Params, InvertedIndex, LexicalEngine};
use docqa::losses::*;
use docqa::vector::VectorStore;
use docqa::{bench, config::PipelineConfig, retrieval, vector};

pub fn segment_markdown(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let doc = Document::new("fuzz.md", text);
    let a = corpus::segment_markdown_with_warnings(&doc, 3);
    let b = corpus::segment_markdown_with_warnings(&doc, 3);
    assert_eq!(a.chunks, b.chunks);
    let mut ids = std::collections::HashSet::new();
    for c in &a.chunks {
        assert!(ids.insert(c.id.clone()), "duplicate id {}", c.id);
    }
}

pub fn chunk_jsonl(data: &[u8]) {
    let Ok(chunks) = corpus::read_chunks(data) else {
        return;
    };
    let mut buf = Vec::new();
    corpus::write_chunks(&chunks, &mut buf).unwrap();
    assert_eq!(corpus::read_chunks(&buf[..]).unwrap(), chunks);
}

pub fn vector_decode(data: &[u8]) {
    let Ok(store) = VectorStore::decode(data) else {
        return;
    };
    let bytes = store.encode();
    assert_eq!(VectorStore::decode(&bytes).unwrap().encode(), bytes);
}

pub fn lexical_json(data: &[u8]) {
    let Ok(index) = InvertedIndex::from_json(data) else {
        return;
    };
    for engine in [LexicalEngine::Bm25, LexicalEngine::Tfidf] {
        for hit in index.search(engine, Bm25Params::default(), "floorplan placement", 5) {
            assert!(hit.score.is_finite());
        }
    }
    let bytes = index.to_json().unwrap();
    assert_eq!(
        InvertedIndex::from_json(&bytes).unwrap().to_json().unwrap(),
        bytes
    );
}

pub fn dataset_json(data: &[u8]) {
    let _ = bench::parse_dataset(data);
}

pub fn ordqa_import(data: &[u8]) {
    let _ = bench::import_ordqa(data, None);
    let chunks = corpus::segment_markdown(
        &Document::new("ifp.md", "# initialize_floorplan\n\nsets up the die\n"),
        2,
    );
    if let Ok(report) = bench::import_ordqa(data, Some(&chunks)) {
        for r in &report.dataset.records {
            for id in &r.reference_chunk_ids {
                assert!(chunks.iter().any(|c| &c.id == id));
            }
        }
    }
}

pub fn config_json(data: &[u8]) {
    let Ok(cfg) = PipelineConfig::from_json(data) else {
        return;
    };
    let again = PipelineConfig::from_json(cfg.to_json().as_bytes()).unwrap();
    assert_eq!(again.hash(), cfg.hash());
}

const POOL: [&str; 3] = ["a.md#x", "b.md#y", "c.md#z"];

pub fn llm_replies(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(labels) = parse_label_response(text, &POOL) {
        assert_eq!(labels.len(), POOL.len());
    }
    if let Ok(parsed) = parse_instruct_response(text, &POOL) {
        assert!(parsed
            .reference_chunk_ids
            .iter()
            .all(|id| POOL.contains(&id.as_str())));
    }
    let _ = PromptAsset::parse(text);
    let _ = TermList::parse(text);
}

pub fn provider_responses(data: &[u8]) {
    let Ok(v) = serde_json::from_slice::<serde_json::Value>(data) else {
        return;
    };
    if let Ok(scores) = retrieval::parse_rerank_response(&v, 3) {
        assert_eq!(scores.len(), 3);
    }
    if let Ok(vecs) = vector::parse_embeddings_response(&v, 2) {
        assert_eq!(vecs.len(), 2);
    }
}

pub fn loss_json(data: &[u8]) {
    if let Ok(b) = serde_json::from_slice::<EmbeddingBatch>(data) {
        let _ = embedding_contrastive_loss(&b);
        let _ = embedding_loss_gradient(&b);
    }
    if let Ok(b) = serde_json::from_slice::<RerankBatch>(data) {
        let _ = reranker_contrastive_loss(&b);
        let _ = reranker_loss_gradient(&b);
    }
    if let Ok(s) = serde_json::from_slice::<TokenSequenceLikelihood>(data) {
        let _ = autoregressive_nll(&s);
    }
}

pub fn report_json(data: &[u8]) {
    let _ = bench::parse_report(data);
}
