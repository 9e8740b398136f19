//! Knowledge engine core: document ingestion into tagged, versioned knowledge
//! units and cited question answering over them.

pub mod answer_generator;
pub mod config;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod knowledge_index;
pub mod knowledge_model;
pub mod model_gateway;
pub mod parser;
pub mod retrieval_engine;
pub mod summarizer;
pub mod tagger;
pub mod text;

pub use error::{Error, Result};
