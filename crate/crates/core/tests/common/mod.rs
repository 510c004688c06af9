#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use docqa::bench::{load_dataset, Dataset};
use docqa::config::{EmbeddingConfig, PipelineConfig};
use docqa::corpus::{ingest_dir, Chunk};
use docqa::generation::CannedClient;
use docqa::pipeline::Pipeline;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini")
}

/// 50 chunks, one per command; every chunk's command name is unique to it.
pub fn fixture_chunks() -> Vec<Chunk> {
    ingest_dir(&fixture_dir().join("docs"), 2).unwrap().chunks
}

pub fn fixture_dataset() -> Dataset {
    load_dataset(&fixture_dir().join("dataset.json")).unwrap()
}

/// The checked-in config: hash embedder, canned reranker and generator,
/// echo judge, timings off.
pub fn fixture_config() -> PipelineConfig {
    PipelineConfig::load(&fixture_dir().join("config.json")).unwrap()
}

/// Default depths with the hash embedder and RRF passthrough.
pub fn default_config() -> PipelineConfig {
    PipelineConfig {
        embedding: EmbeddingConfig::Hash { dim: 256, seed: 0 },
        record_timings: false,
        ..PipelineConfig::default()
    }
}

pub fn echo_generator(dataset: &Dataset) -> Arc<CannedClient> {
    Arc::new(CannedClient::from_answers(
        dataset
            .records
            .iter()
            .map(|r| (r.question.clone(), r.answer.clone())),
    ))
}

pub fn fixture_pipeline(cfg: PipelineConfig) -> Pipeline {
    Pipeline::builder(cfg, fixture_chunks()).build().unwrap()
}
