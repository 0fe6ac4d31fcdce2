//! Retrieval-augmented few-shot biomedical NER.
//!
//! The pipeline: load a corpus, build a K-shot support set by greedy
//! sampling, retrieve per-query demonstrations (label pre-identification
//! via the gateway, per-label candidate pools over the dev split, KNN on
//! sentence embeddings, greedy finalization), render a chain-of-thought
//! prompt, call the LLM through a cached gateway, parse the templated
//! answer back into spans, and score micro-F1 under the IO scheme with an
//! error-taxonomy breakdown.

pub mod corpus;
pub mod prompter;
pub mod retriever;
pub mod runner;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod sampler;

pub use error::{Error, Result};
