//! Retrieval-augmented question answering over tool documentation.
//!
//! The crate covers the whole flow: markdown chunking ([`corpus`]), sparse
//! and dense retrieval ([`lexical`], [`vector`]), fusion and reranking
//! ([`retrieval`]), prompt assembly and generation ([`generation`]), the
//! end-to-end [`pipeline`], answer metrics ([`metrics`]), training-objective
//! calculators ([`losses`]), training-data builders ([`datagen`]) and the
//! benchmark harness ([`bench`]).

pub mod bench;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod generation;
pub mod http;
pub mod lexical;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod tokenize;
pub mod vector;

pub use error::{Error, Result};
