//! Deterministic stand-ins for every model role. They never touch the network
//! and always return the same output for the same prompt.

use std::sync::Arc;

use super::{prompt, BackendError, CompletionBackend, EmbeddingBackend, ModelRole};
use crate::answer_generator::GenerationRequest;
use crate::retrieval_engine::ClassifyRequest;
use crate::tagger::{keyword_scores, TaggingRequest, TaggingResponse};
use crate::text::{first_sentences, fnv1a64, tokens};

pub const POWERFUL_WORD_LIMIT: usize = 120;

pub fn stub_for(role: ModelRole) -> Arc<dyn CompletionBackend> {
    match role {
        ModelRole::Cheap => Arc::new(CheapStub),
        ModelRole::Powerful => Arc::new(PowerfulStub),
        ModelRole::Tagging => Arc::new(TaggingStub),
        ModelRole::Reasoning => Arc::new(ReasoningStub),
        ModelRole::Generation | ModelRole::Embedding => Arc::new(GenerationStub),
    }
}

/// First two sentences of the input.
#[derive(Debug, Default)]
pub struct CheapStub;

impl CompletionBackend for CheapStub {
    fn complete(&self, p: &str) -> Result<String, BackendError> {
        Ok(first_sentences(prompt::payload(p), 2))
    }
}

/// Concatenates the input and truncates it to 120 words. Separator lines made
/// only of dashes are dropped.
#[derive(Debug, Default)]
pub struct PowerfulStub;

impl CompletionBackend for PowerfulStub {
    fn complete(&self, p: &str) -> Result<String, BackendError> {
        let words: Vec<&str> = prompt::payload(p)
            .split_whitespace()
            .filter(|w| !w.chars().all(|c| c == '-'))
            .take(POWERFUL_WORD_LIMIT)
            .collect();
        Ok(words.join(" "))
    }
}

/// Normalized keyword-mass scorer; expects a JSON [`TaggingRequest`] payload.
#[derive(Debug, Default)]
pub struct TaggingStub;

impl CompletionBackend for TaggingStub {
    fn complete(&self, p: &str) -> Result<String, BackendError> {
        let req: TaggingRequest = serde_json::from_str(prompt::payload(p))
            .map_err(|e| BackendError::Permanent(format!("tagging stub: bad request: {e}")))?;
        let scores = keyword_scores(&req.content, &req.facets);
        serde_json::to_string(&TaggingResponse { scores })
            .map_err(|e| BackendError::Permanent(e.to_string()))
    }
}

/// Answers `deep` when the request reports a length or keyword trigger.
#[derive(Debug, Default)]
pub struct ReasoningStub;

impl CompletionBackend for ReasoningStub {
    fn complete(&self, p: &str) -> Result<String, BackendError> {
        let req: ClassifyRequest = serde_json::from_str(prompt::payload(p))
            .map_err(|e| BackendError::Permanent(format!("reasoning stub: bad request: {e}")))?;
        let deep = req.token_count > req.token_threshold || !req.triggers.is_empty();
        Ok(if deep { "deep" } else { "single" }.into())
    }
}

/// Question enrichment and cited answers built directly from context summaries.
#[derive(Debug, Default)]
pub struct GenerationStub;

impl CompletionBackend for GenerationStub {
    fn complete(&self, p: &str) -> Result<String, BackendError> {
        let req: GenerationRequest = serde_json::from_str(prompt::payload(p))
            .map_err(|e| BackendError::Permanent(format!("generation stub: bad request: {e}")))?;
        Ok(match req {
            GenerationRequest::Enhance { question, context } => {
                if context.is_empty() {
                    question
                } else {
                    let summaries: Vec<&str> =
                        context.iter().take(3).map(|c| c.summary.as_str()).collect();
                    format!("{question} Consider: {}", summaries.join("; "))
                }
            }
            GenerationRequest::Answer {
                question, context, ..
            } => {
                if context.is_empty() {
                    format!(
                        "No supporting evidence was found in the knowledge base for: {question}"
                    )
                } else {
                    context
                        .iter()
                        .map(|c| format!("{} [[unit:{}]]", c.summary.trim(), c.unit_id))
                        .collect::<Vec<_>>()
                        .join(" ")
                }
            }
        })
    }
}

const BUCKET_SEED: u64 = 0;
const SIGN_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Hashed bag-of-words: each token adds ±1 to one of `dim` buckets, then the
/// vector is L2-normalized. Text without any token maps to the axis-0 vector.
#[derive(Debug, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn vector(text: &str, dim: usize) -> Vec<f32> {
        let mut acc = vec![0f64; dim];
        for tok in tokens(text) {
            let bucket = (fnv1a64(tok.as_bytes(), BUCKET_SEED) % dim as u64) as usize;
            let sign = if fnv1a64(tok.as_bytes(), SIGN_SEED) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut v = vec![0f32; dim];
            if dim > 0 {
                v[0] = 1.0;
            }
            return v;
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, text: &str, dim: usize) -> Result<Vec<f32>, BackendError> {
        Ok(Self::vector(text, dim))
    }
}
