//! Query classification and retrieval orchestration.
//!
//! Simple questions get one retrieval round. Complex ones run an iterative loop
//! where each hop searches with the original question plus the summaries of the
//! units first seen on the previous hop. Every run produces a [`RetrievalTrace`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_index::{KnowledgeIndex, Query, ScoredHit};
use crate::knowledge_model::UnitId;
use crate::model_gateway::{prompt, Embedder, Gateway, ModelRole};
use crate::text::tokens;

pub const DEFAULT_MAX_HOPS: usize = 3;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_NOVELTY_FLOOR: f64 = 0.25;
pub const DEFAULT_ENRICH_TOP_M: usize = 3;
pub const DEFAULT_TOKEN_THRESHOLD: usize = 24;
pub const HOP_SEPARATOR: &str = "\n\n";

pub const DEFAULT_TRIGGERS: &[&str] = &[
    "compare",
    "compared",
    "comparison",
    "versus",
    "vs",
    "across",
    "why",
    "relate",
    "relates",
    "related to",
    "relationship",
    "differ",
    "differs",
    "difference",
    "cause",
    "causes",
    "impact",
    "between",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleShot,
    DeepResearch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    #[default]
    Heuristic,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub max_hops: usize,
    pub k: usize,
    pub novelty_floor: f64,
    pub enrich_top_m: usize,
    pub complex_token_threshold: usize,
    pub triggers: Vec<String>,
    pub classifier: ClassifierMode,
    /// Context units handed to generation.
    pub context_limit: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            max_hops: DEFAULT_MAX_HOPS,
            k: DEFAULT_K,
            novelty_floor: DEFAULT_NOVELTY_FLOOR,
            enrich_top_m: DEFAULT_ENRICH_TOP_M,
            complex_token_threshold: DEFAULT_TOKEN_THRESHOLD,
            triggers: DEFAULT_TRIGGERS.iter().map(|s| s.to_string()).collect(),
            classifier: ClassifierMode::Heuristic,
            context_limit: crate::answer_generator::DEFAULT_CONTEXT_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub token_count: usize,
    pub interrogative: bool,
    /// Configured trigger keywords found in the query, in list order.
    pub triggers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub chosen: Strategy,
    pub rationale: String,
    pub features: QueryFeatures,
    pub forced: bool,
}

/// Payload sent to the reasoning role when the classifier runs in model mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub query: String,
    pub token_count: usize,
    pub token_threshold: usize,
    pub interrogative: bool,
    pub triggers: Vec<String>,
}

const INTERROGATIVES: &[&str] = &[
    "what", "which", "who", "whom", "whose", "when", "where", "why", "how", "is", "are", "does",
    "do", "did", "can", "could", "should", "would", "will",
];

pub fn features(q: &str, triggers: &[String]) -> QueryFeatures {
    let toks: Vec<String> = tokens(q).collect();
    let interrogative = q.trim_end().ends_with('?')
        || toks
            .first()
            .is_some_and(|t| INTERROGATIVES.contains(&t.as_str()));
    let hits = triggers
        .iter()
        .filter(|kw| {
            let kw_toks: Vec<String> = tokens(kw).collect();
            !kw_toks.is_empty() && toks.windows(kw_toks.len()).any(|w| w == kw_toks.as_slice())
        })
        .cloned()
        .collect();
    QueryFeatures {
        token_count: toks.len(),
        interrogative,
        triggers: hits,
    }
}

/// Chooses a strategy for `q`. `force` pins the result regardless of features.
/// In model mode the reasoning role makes the call; the gateway is unused
/// otherwise.
pub fn classify(
    q: &str,
    params: &RetrievalParams,
    force: Option<Strategy>,
    gateway: &Gateway,
) -> Result<StrategyDecision> {
    if q.trim().is_empty() {
        return Err(Error::invalid("query must not be empty"));
    }
    let features = features(q, &params.triggers);
    if let Some(chosen) = force {
        return Ok(StrategyDecision {
            chosen,
            rationale: format!("caller forced {}", strategy_name(chosen)),
            features,
            forced: true,
        });
    }

    let long = features.token_count > params.complex_token_threshold;
    let (chosen, rationale) = match params.classifier {
        ClassifierMode::Heuristic => {
            let mut reasons = Vec::new();
            if long {
                reasons.push(format!(
                    "{} tokens exceeds threshold {}",
                    features.token_count, params.complex_token_threshold
                ));
            }
            if !features.triggers.is_empty() {
                reasons.push(format!(
                    "trigger keywords: {}",
                    features.triggers.join(", ")
                ));
            }
            if reasons.is_empty() {
                (
                    Strategy::SingleShot,
                    format!("{} tokens, no trigger keywords", features.token_count),
                )
            } else {
                (Strategy::DeepResearch, reasons.join("; "))
            }
        }
        ClassifierMode::Model => {
            let req = ClassifyRequest {
                query: q.to_string(),
                token_count: features.token_count,
                token_threshold: params.complex_token_threshold,
                interrogative: features.interrogative,
                triggers: features.triggers.clone(),
            };
            let reply = gateway.complete(
                ModelRole::Reasoning,
                &prompt::wrap(CLASSIFY_INSTRUCTION, &serde_json::to_string(&req)?),
            )?;
            let deep = reply.to_ascii_lowercase().contains("deep");
            let chosen = if deep {
                Strategy::DeepResearch
            } else {
                Strategy::SingleShot
            };
            (
                chosen,
                format!("reasoning model answered `{}`", reply.trim()),
            )
        }
    };
    Ok(StrategyDecision {
        chosen,
        rationale,
        features,
        forced: false,
    })
}

const CLASSIFY_INSTRUCTION: &str = "Decide whether the question below can be answered from a \
single retrieval round (`single`) or needs iterative multi-hop research (`deep`). The input is \
JSON with the question and its surface features. Reply with one word: single or deep.";

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::SingleShot => "single-shot retrieval",
        Strategy::DeepResearch => "deep research",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxHops,
    NoveltyExhausted,
    SingleShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    /// 1-based.
    pub hop_index: usize,
    pub hop_query: String,
    pub hits: Vec<ScoredHit>,
    pub new_unit_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub query_id: String,
    pub query: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<StrategyDecision>,
    pub k: usize,
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
    pub hops: Vec<Hop>,
    pub stop_reason: StopReason,
    /// Every unit seen on any hop, by first hop seen then rank.
    pub final_context: Vec<UnitId>,
}

impl RetrievalTrace {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    /// Problems with the structural invariants; empty when the trace is sound.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (i, hop) in self.hops.iter().enumerate() {
            if hop.hop_index != i + 1 {
                problems.push(format!("hop {} has index {}", i + 1, hop.hop_index));
            }
            if hop.hop_index >= 2 && !hop.hop_query.contains(&self.query) {
                problems.push(format!(
                    "hop {} query omits the original question",
                    hop.hop_index
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for id in &self.final_context {
            if !seen.insert(id) {
                problems.push(format!("{id} repeated in final context"));
            }
            if !self
                .hops
                .iter()
                .any(|h| h.hits.iter().any(|x| &x.unit_id == id))
            {
                problems.push(format!("{id} in final context but in no hop"));
            }
        }
        problems
    }
}

fn query_for(base: &Query, text: String) -> Query {
    Query {
        text,
        ..base.clone()
    }
}

/// One retrieval round with `base.text`; `base.k` is the result size.
pub fn run_single_shot(
    query_id: &str,
    base: &Query,
    index: &KnowledgeIndex,
    embedder: &dyn Embedder,
) -> Result<RetrievalTrace> {
    let hits = index.retrieve(base, embedder)?;
    let final_context = hits.iter().map(|h| h.unit_id.clone()).collect();
    Ok(RetrievalTrace {
        query_id: query_id.to_string(),
        query: base.text.clone(),
        strategy: Strategy::SingleShot,
        decision: None,
        k: base.k,
        as_of: base.as_of,
        hops: vec![Hop {
            hop_index: 1,
            hop_query: base.text.clone(),
            new_unit_count: hits.len(),
            hits,
        }],
        stop_reason: StopReason::SingleShot,
        final_context,
    })
}

/// Iterative retrieval. Hop 1 searches with `base.text`; hop t ≥ 2 searches
/// with the question followed by the summaries of the first `enrich_top_m`
/// units that hop t−1 saw for the first time. The loop ends at `max_hops` or
/// when a hop's share of new units falls below `novelty_floor`.
pub fn run_deep_research(
    query_id: &str,
    base: &Query,
    index: &KnowledgeIndex,
    embedder: &dyn Embedder,
    params: &RetrievalParams,
) -> Result<RetrievalTrace> {
    if params.max_hops < 1 {
        return Err(Error::invalid("max_hops must be at least 1"));
    }
    if !(0.0..=1.0).contains(&params.novelty_floor) {
        return Err(Error::invalid("novelty_floor must lie in [0, 1]"));
    }
    let mut seen: BTreeSet<UnitId> = BTreeSet::new();
    let mut final_context = Vec::new();
    let mut hops: Vec<Hop> = Vec::new();
    let mut hop_query = base.text.clone();
    let stop_reason = loop {
        let t = hops.len() + 1;
        let hits = index.retrieve(&query_for(base, hop_query.clone()), embedder)?;
        let fresh: Vec<UnitId> = hits
            .iter()
            .filter(|h| !seen.contains(&h.unit_id))
            .map(|h| h.unit_id.clone())
            .collect();
        seen.extend(fresh.iter().cloned());
        final_context.extend(fresh.iter().cloned());
        hops.push(Hop {
            hop_index: t,
            hop_query: hop_query.clone(),
            new_unit_count: fresh.len(),
            hits,
        });

        if t >= params.max_hops {
            break StopReason::MaxHops;
        }
        if (fresh.len() as f64) / (base.k as f64) < params.novelty_floor {
            break StopReason::NoveltyExhausted;
        }
        let enrichment: Vec<String> = fresh
            .iter()
            .take(params.enrich_top_m)
            .filter_map(|id| index.get(id))
            .map(|u| u.summary)
            .collect();
        hop_query = format!("{}{HOP_SEPARATOR}{}", base.text, enrichment.join(" "));
    };

    Ok(RetrievalTrace {
        query_id: query_id.to_string(),
        query: base.text.clone(),
        strategy: Strategy::DeepResearch,
        decision: None,
        k: base.k,
        as_of: base.as_of,
        hops,
        stop_reason,
        final_context,
    })
}

pub fn trace_path(dir: &Path, query_id: &str) -> PathBuf {
    dir.join(format!("{query_id}.json"))
}

/// Writes `traces/{query_id}.json` via a temporary file and a rename.
pub fn write_trace(dir: &Path, trace: &RetrievalTrace) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = trace_path(dir, &trace.query_id);
    let tmp = dir.join(format!(".{}.json.tmp", trace.query_id));
    fs::write(&tmp, serde_json::to_vec_pretty(trace)?)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_trace(dir: &Path, query_id: &str) -> Result<RetrievalTrace> {
    let valid = !query_id.is_empty()
        && query_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if !valid {
        return Err(Error::NotFound(format!("trace {query_id}")));
    }
    let path = trace_path(dir, query_id);
    match fs::read(&path) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::NotFound(format!("trace {query_id}")))
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_model::{
        DocId, ElementId, Facet, KnowledgeUnit, Provenance, Span, TagAssignment,
    };

    fn gw() -> Gateway {
        Gateway::offline(64)
    }

    #[test]
    fn classify_examples() {
        let p = RetrievalParams::default();
        let d = classify("What is the sample period?", &p, None, &gw()).unwrap();
        assert_eq!(d.chosen, Strategy::SingleShot);
        assert_eq!(d.features.token_count, 5);
        assert!(d.features.interrogative);

        let d = classify(
            "Compare the overnight-return factor's behavior across the A-share and US markets and explain why it differs",
            &p,
            None,
            &gw(),
        )
        .unwrap();
        assert_eq!(d.chosen, Strategy::DeepResearch);
        for kw in ["compare", "across", "why"] {
            assert!(d.features.triggers.iter().any(|t| t == kw), "{kw}");
        }

        let d = classify(
            "What is the sample period?",
            &p,
            Some(Strategy::DeepResearch),
            &gw(),
        )
        .unwrap();
        assert_eq!(d.chosen, Strategy::DeepResearch);
        assert!(d.forced);
        assert!(matches!(
            classify("  ", &p, None, &gw()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn classify_token_threshold_and_model_mode() {
        let mut p = RetrievalParams::default();
        let long = "word ".repeat(25);
        assert_eq!(
            classify(&long, &p, None, &gw()).unwrap().chosen,
            Strategy::DeepResearch
        );
        let exactly = "word ".repeat(24);
        assert_eq!(
            classify(&exactly, &p, None, &gw()).unwrap().chosen,
            Strategy::SingleShot
        );

        p.classifier = ClassifierMode::Model;
        let g = gw();
        assert_eq!(
            classify(&long, &p, None, &g).unwrap().chosen,
            Strategy::DeepResearch
        );
        assert_eq!(
            classify("What is beta?", &p, None, &g).unwrap().chosen,
            Strategy::SingleShot
        );
        assert_eq!(g.record_count(), 2);
    }

    fn unit(g: &Gateway, id: &str, summary: &str) -> KnowledgeUnit {
        KnowledgeUnit {
            unit_id: UnitId::new(id),
            doc_id: DocId::new(id),
            version: 1,
            element_id: ElementId::new("e0"),
            summary: summary.into(),
            tags: vec![TagAssignment {
                facet: Facet::PrimaryArea,
                tag: "factor-investing".into(),
                confidence: 1.0,
            }],
            embedding: g.embed(summary).unwrap(),
            provenance: Provenance {
                uri: id.into(),
                span: Span::new(0, 1),
                effective_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            },
        }
    }

    #[test]
    fn single_shot_matches_direct_retrieval() {
        let g = gw();
        let idx = KnowledgeIndex::new(64, None);
        for i in 0..20 {
            idx.upsert(unit(
                &g,
                &format!("u{i:02}"),
                &format!("topic {i} returns alpha {}", i % 3),
            ))
            .unwrap();
        }
        let q = Query::new("returns alpha 2", 5);
        let trace = run_single_shot("q1", &q, &idx, &g).unwrap();
        assert_eq!(trace.hops.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::SingleShot);
        assert_eq!(trace.hops[0].hits, idx.retrieve(&q, &g).unwrap());
        assert!(trace.check().is_empty());

        let empty = KnowledgeIndex::new(64, None);
        let t = run_single_shot("q2", &q, &empty, &g).unwrap();
        assert_eq!(t.hops.len(), 1);
        assert!(t.hops[0].hits.is_empty());
    }

    #[test]
    fn deep_research_limits() {
        let g = gw();
        let idx = KnowledgeIndex::new(64, None);
        for i in 0..30 {
            idx.upsert(unit(
                &g,
                &format!("u{i:02}"),
                &format!("note {i} mentions term{}", i % 7),
            ))
            .unwrap();
        }
        let q = Query::new("mentions term3", 4);
        let mut p = RetrievalParams {
            max_hops: 1,
            ..RetrievalParams::default()
        };
        let one = run_deep_research("a", &q, &idx, &g, &p).unwrap();
        assert_eq!(one.stop_reason, StopReason::MaxHops);
        assert_eq!(
            one.hops[0].hits,
            run_single_shot("b", &q, &idx, &g).unwrap().hops[0].hits
        );

        p.max_hops = 3;
        let deep = run_deep_research("c", &q, &idx, &g, &p).unwrap();
        assert!(deep.hops.len() <= 3);
        assert!(deep.check().is_empty(), "{:?}", deep.check());

        p.max_hops = 0;
        assert!(matches!(
            run_deep_research("d", &q, &idx, &g, &p),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn novelty_floor_one_stops_when_hop_one_is_short() {
        let g = gw();
        let idx = KnowledgeIndex::new(64, None);
        for i in 0..3 {
            idx.upsert(unit(&g, &format!("u{i}"), &format!("entry {i}")))
                .unwrap();
        }
        let p = RetrievalParams {
            novelty_floor: 1.0,
            ..RetrievalParams::default()
        };
        let t = run_deep_research("x", &Query::new("entry", 8), &idx, &g, &p).unwrap();
        assert_eq!(t.hops.len(), 1);
        assert_eq!(t.stop_reason, StopReason::NoveltyExhausted);
    }

    #[test]
    fn trace_file_round_trip() {
        let g = gw();
        let idx = KnowledgeIndex::new(64, None);
        idx.upsert(unit(&g, "a", "alpha")).unwrap();
        let t = run_single_shot("abc-123", &Query::new("alpha", 2), &idx, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_trace(dir.path(), &t).unwrap();
        assert_eq!(read_trace(dir.path(), "abc-123").unwrap(), t);
        assert!(matches!(
            read_trace(dir.path(), "missing"),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(
            read_trace(dir.path(), "../x"),
            Err(Error::NotFound(_))
        ));
    }
}
