//! Question enrichment and cited answer generation.
//!
//! The generation model is asked to tag claims with inline `[[unit:<id>]]`
//! markers. Markers are parsed into citations and removed from the display
//! text; each citation covers the claim text that precedes its marker.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::knowledge_index::KnowledgeIndex;
use crate::knowledge_model::UnitId;
use crate::model_gateway::{prompt, Gateway, ModelRole};
use crate::retrieval_engine::RetrievalTrace;

pub const DEFAULT_CONTEXT_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub unit_id: UnitId,
    pub summary: String,
}

/// JSON payload carried inside generation prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum GenerationRequest {
    Enhance {
        question: String,
        context: Vec<ContextItem>,
    },
    Answer {
        question: String,
        enhanced_question: String,
        context: Vec<ContextItem>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedQuestion {
    pub original: String,
    pub enriched_text: String,
    pub context_unit_ids: Vec<UnitId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFlag {
    MissingCitations,
    DanglingCitation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    /// Byte range of the claim in `answer_text`.
    pub start: usize,
    pub end: usize,
    pub unit_id: UnitId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditableAnswer {
    pub answer_text: String,
    pub citations: Vec<Citation>,
    pub trace_ref: String,
    pub model_role: ModelRole,
    pub generated_at: DateTime<Utc>,
    #[serde(default)]
    pub flags: Vec<AnswerFlag>,
    /// Marker ids that did not name a context unit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
    pub context_unit_ids: Vec<UnitId>,
}

impl AuditableAnswer {
    pub fn has_flag(&self, flag: AnswerFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn claim(&self, c: &Citation) -> &str {
        &self.answer_text[c.start..c.end]
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\[unit:([^\[\]\s]+)\]\]").unwrap())
}

/// A marker found in raw model output, located in the cleaned text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMarker {
    pub claim_start: usize,
    pub claim_end: usize,
    pub unit_id: String,
}

/// Strips every marker (and the whitespace directly before it) from `raw`.
/// Each marker's claim runs from the previous claim boundary to the marker,
/// trimmed of surrounding whitespace; markers that follow one another share a
/// claim.
pub fn parse_markers(raw: &str) -> (String, Vec<ParsedMarker>) {
    let mut display = String::with_capacity(raw.len());
    let mut markers: Vec<ParsedMarker> = Vec::new();
    let mut last = 0;
    let mut boundary = 0;
    for cap in marker_re().captures_iter(raw) {
        let m = cap.get(0).unwrap();
        display.push_str(raw[last..m.start()].trim_end());
        last = m.end();
        let end = display.len();
        let span = match markers.last() {
            Some(prev) if boundary == end => (prev.claim_start, prev.claim_end),
            _ => {
                let seg = &display[boundary..end];
                let start = boundary + (seg.len() - seg.trim_start().len());
                (start.min(end), end)
            }
        };
        boundary = end;
        markers.push(ParsedMarker {
            claim_start: span.0,
            claim_end: span.1,
            unit_id: cap[1].to_string(),
        });
    }
    display.push_str(&raw[last..]);
    (display, markers)
}

fn context_items(index: &KnowledgeIndex, ids: &[UnitId]) -> Vec<ContextItem> {
    ids.iter()
        .filter_map(|id| {
            index.get(id).map(|u| ContextItem {
                unit_id: id.clone(),
                summary: u.summary,
            })
        })
        .collect()
}

const ENHANCE_INSTRUCTION: &str = "Rewrite the question so that it carries the background \
needed to answer it well. Keep the original question verbatim at the start and append the most \
relevant concepts from the context summaries. The input is JSON with the question and context.";

const ANSWER_INSTRUCTION: &str = "Answer the question using only the supplied context units. \
After every claim, cite its supporting unit with a marker of the form [[unit:<id>]] using the \
exact unit_id. Do not cite units that are not in the context. The input is JSON with the \
question, the enriched question and the context.";

/// Up to `limit` units of the trace's final context, taken round-robin over
/// the units each hop added: first new unit of every hop, then the second, and
/// so on. Single-hop traces keep their ranked order.
pub fn select_context(trace: &RetrievalTrace, limit: usize) -> Vec<UnitId> {
    let mut per_hop: Vec<&[UnitId]> = Vec::new();
    let mut rest = trace.final_context.as_slice();
    for hop in &trace.hops {
        let (head, tail) = rest.split_at(hop.new_unit_count.min(rest.len()));
        per_hop.push(head);
        rest = tail;
    }
    if !rest.is_empty() {
        per_hop.push(rest);
    }
    let mut out = Vec::with_capacity(limit);
    let mut depth = 0;
    while out.len() < limit {
        let mut any = false;
        for hop in &per_hop {
            if let Some(id) = hop.get(depth) {
                any = true;
                if out.len() < limit {
                    out.push(id.clone());
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    out
}

/// Enriches `q` with the units chosen by [`select_context`].
/// With no context the question comes back unchanged and no model is called.
pub fn enhance_question(
    q: &str,
    trace: &RetrievalTrace,
    index: &KnowledgeIndex,
    gateway: &Gateway,
    limit: usize,
) -> Result<EnhancedQuestion> {
    let ids = select_context(trace, limit);
    let context = context_items(index, &ids);
    let context_unit_ids: Vec<UnitId> = context.iter().map(|c| c.unit_id.clone()).collect();
    if context.is_empty() {
        return Ok(EnhancedQuestion {
            original: q.to_string(),
            enriched_text: q.to_string(),
            context_unit_ids,
        });
    }
    let req = GenerationRequest::Enhance {
        question: q.to_string(),
        context,
    };
    let out = gateway.complete(
        ModelRole::Generation,
        &prompt::wrap(ENHANCE_INSTRUCTION, &serde_json::to_string(&req)?),
    )?;
    let enriched_text = if out.contains(q) {
        out
    } else {
        format!("{q}\n\n{out}")
    };
    Ok(EnhancedQuestion {
        original: q.to_string(),
        enriched_text,
        context_unit_ids,
    })
}

pub fn generate_answer(
    eq: &EnhancedQuestion,
    trace: &RetrievalTrace,
    index: &KnowledgeIndex,
    gateway: &Gateway,
) -> Result<AuditableAnswer> {
    let context = context_items(index, &eq.context_unit_ids);
    let req = GenerationRequest::Answer {
        question: eq.original.clone(),
        enhanced_question: eq.enriched_text.clone(),
        context,
    };
    let raw = gateway.complete(
        ModelRole::Generation,
        &prompt::wrap(ANSWER_INSTRUCTION, &serde_json::to_string(&req)?),
    )?;
    Ok(bind_citations(&raw, &eq.context_unit_ids, &trace.query_id))
}

/// Turns raw model output into an answer whose citations all name context units.
pub fn bind_citations(raw: &str, context: &[UnitId], trace_ref: &str) -> AuditableAnswer {
    let allowed: BTreeSet<&str> = context.iter().map(UnitId::as_str).collect();
    let (answer_text, markers) = parse_markers(raw);
    let mut citations = Vec::new();
    let mut rejected = Vec::new();
    for m in markers {
        if allowed.contains(m.unit_id.as_str()) {
            citations.push(Citation {
                start: m.claim_start,
                end: m.claim_end,
                unit_id: UnitId::new(m.unit_id),
            });
        } else {
            rejected.push(m.unit_id);
        }
    }
    let mut flags = Vec::new();
    if citations.is_empty() {
        flags.push(AnswerFlag::MissingCitations);
    }
    if !rejected.is_empty() {
        flags.push(AnswerFlag::DanglingCitation);
    }
    AuditableAnswer {
        answer_text,
        citations,
        trace_ref: trace_ref.to_string(),
        model_role: ModelRole::Generation,
        generated_at: Utc::now(),
        flags,
        rejected,
        context_unit_ids: context.to_vec(),
    }
}
