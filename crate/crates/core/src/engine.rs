//! The assembled engine: ingestion (parse, summarize, tag, embed, commit) and
//! question answering (classify, retrieve, enhance, generate) over one store.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{NaiveDate, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::answer_generator::{enhance_question, generate_answer, AuditableAnswer};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::evalkit::{self, Fixtures, Table1};
use crate::knowledge_index::{KnowledgeIndex, Query, RetrievalMode, VersionEntry, UNITS_FILE};
use crate::knowledge_model::{
    make_unit_id, ContentHash, DocId, ElementKind, Facet, KnowledgeUnit, ModalElement, Provenance,
    SourceDocument, TagAssignment, UnitId,
};
use crate::model_gateway::{Gateway, ModelRole, ReqwestTransport};
use crate::parser::{self, ParserBackend};
use crate::retrieval_engine::{
    classify, read_trace, run_deep_research, run_single_shot, write_trace, RetrievalTrace,
    Strategy, StrategyDecision,
};
use crate::summarizer::{self, CostLedger};
use crate::tagger::{self, Taxonomy};
use crate::text::{collapse_whitespace, first_sentences, truncate_words};

pub const UNIT_SUMMARY_WORDS: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub uri: String,
    pub effective_date: NaiveDate,
    /// Defaults to the URI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Created,
    /// Same bytes as the latest stored version; nothing changed.
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub doc_id: DocId,
    pub version: u32,
    pub status: IngestStatus,
    pub content_hash: ContentHash,
    pub unit_count: usize,
    pub units_by_kind: BTreeMap<ElementKind, usize>,
    pub unit_ids: Vec<UnitId>,
    pub summary: String,
    pub cost: CostLedger,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    #[default]
    Auto,
    Single,
    Deep,
}

impl StrategyChoice {
    fn forced(self) -> Option<Strategy> {
        match self {
            StrategyChoice::Auto => None,
            StrategyChoice::Single => Some(Strategy::SingleShot),
            StrategyChoice::Deep => Some(Strategy::DeepResearch),
        }
    }
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(StrategyChoice::Auto),
            "single" => Ok(StrategyChoice::Single),
            "deep" => Ok(StrategyChoice::Deep),
            other => Err(Error::invalid(format!(
                "unknown strategy `{other}` (expected auto, single or deep)"
            ))),
        }
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyChoice::Auto => "auto",
            StrategyChoice::Single => "single",
            StrategyChoice::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagFilter {
    pub facet: Facet,
    pub tag: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryOptions {
    pub strategy: StrategyChoice,
    pub k: Option<usize>,
    pub as_of: Option<NaiveDate>,
    pub tags: Vec<TagFilter>,
    pub mode: RetrievalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: AuditableAnswer,
    pub trace: RetrievalTrace,
}

impl QueryResponse {
    pub fn decision(&self) -> Option<&StrategyDecision> {
        self.trace.decision.as_ref()
    }
}

/// Extractive summary of one element: its first two sentences, capped at
/// [`UNIT_SUMMARY_WORDS`] words. Tables and formulas keep their leading words.
pub fn unit_summary(element: &ModalElement) -> String {
    let flat = collapse_whitespace(&element.content);
    let lead = match element.kind {
        ElementKind::Text => first_sentences(&flat, 2),
        ElementKind::FigureOrTable | ElementKind::Formula => flat.clone(),
    };
    let s = truncate_words(&lead, UNIT_SUMMARY_WORDS);
    if s.trim().is_empty() {
        truncate_words(&flat, UNIT_SUMMARY_WORDS)
    } else {
        s
    }
}

pub struct Engine {
    config: EngineConfig,
    gateway: Arc<Gateway>,
    index: KnowledgeIndex,
    taxonomy: Arc<Taxonomy>,
    parser: Box<dyn ParserBackend>,
    ingest_lock: Mutex<()>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("store_dir", &self.config.store_dir)
            .field("index", &self.index)
            .finish()
    }
}

impl Engine {
    /// Validates `config`, builds the gateway it describes and opens (or
    /// creates) the store.
    pub fn open(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let gateway = Gateway::from_config(
            &config.gateway,
            config.dim,
            Arc::new(ReqwestTransport::default()),
        )?;
        Self::with_gateway(config, gateway)
    }

    pub fn with_gateway(config: EngineConfig, gateway: Gateway) -> Result<Self> {
        config.validate()?;
        if gateway.dim() != config.dim {
            return Err(Error::config(
                "dim",
                format!("gateway embeds into {} dimensions", gateway.dim()),
            ));
        }
        let taxonomy = Arc::new(config.taxonomy()?);
        let parser = parser::backend_by_name(&config.parser.backend)?;
        for dir in [config.index_dir(), config.traces_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| {
                Error::config("store_dir", format!("cannot create {}: {e}", dir.display()))
            })?;
        }
        let index_dir = config.index_dir();
        let index = if index_dir.join(UNITS_FILE).exists() {
            KnowledgeIndex::load(&index_dir, config.dim, Some(Arc::clone(&taxonomy)))?
        } else {
            KnowledgeIndex::new(config.dim, Some(Arc::clone(&taxonomy)))
        };
        Ok(Self {
            config,
            gateway: Arc::new(gateway),
            index,
            taxonomy,
            parser,
            ingest_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn index(&self) -> &KnowledgeIndex {
        &self.index
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.config.traces_dir()
    }

    pub fn ingest(&self, content: &[u8], meta: &DocumentMeta) -> Result<IngestReport> {
        if meta.uri.trim().is_empty() {
            return Err(Error::invalid("document uri must not be empty"));
        }
        let doc_id = DocId::new(meta.doc_id.clone().unwrap_or_else(|| meta.uri.clone()));
        if doc_id.as_str().trim().is_empty() {
            return Err(Error::invalid("doc_id must not be empty"));
        }
        let _guard = self.ingest_lock.lock();

        let hash = ContentHash::of(content);
        let latest = self.index.latest_version(&doc_id);
        let mut warnings = Vec::new();
        if let Some(prev) = &latest {
            if prev.content_hash.as_ref() == Some(&hash) {
                tracing::info!(doc_id = %doc_id, version = prev.version, "content unchanged");
                return Ok(IngestReport {
                    doc_id,
                    version: prev.version,
                    status: IngestStatus::Unchanged,
                    content_hash: hash,
                    unit_count: 0,
                    units_by_kind: ElementKind::ALL.iter().map(|k| (*k, 0)).collect(),
                    unit_ids: Vec::new(),
                    summary: String::new(),
                    cost: CostLedger::default(),
                    warnings,
                });
            }
            if meta.effective_date < prev.effective_date {
                warnings.push(format!(
                    "effective date {} precedes version {} ({})",
                    meta.effective_date, prev.version, prev.effective_date
                ));
            }
        }
        let version = latest.map_or(1, |v| v.version + 1);
        let doc = SourceDocument::new(
            doc_id.clone(),
            meta.uri.clone(),
            content.to_vec(),
            meta.effective_date,
            version,
            Utc::now(),
        );

        let parsed = self.parser.parse(&doc).map_err(|e| e.at_stage("parse"))?;
        if parsed.elements.is_empty() {
            warnings.push("document produced no elements".into());
        }
        let bundle = summarizer::summarize(
            &parsed,
            &self.gateway,
            self.config.summarizer.budget,
            &self.config.summarizer.separator,
        )
        .map_err(|e| e.at_stage("summarize"))?;

        let summaries: Vec<String> = parsed.elements.iter().map(unit_summary).collect();
        let tag_inputs: Vec<String> = parsed
            .elements
            .iter()
            .map(|e| format!("{}\n\n{}", e.content, bundle.final_summary))
            .collect();
        let tags: Vec<Vec<TagAssignment>> = self
            .parallel(&tag_inputs, |text| {
                tagger::tag(
                    text,
                    &self.taxonomy,
                    &self.gateway,
                    self.config.tagger.threshold,
                )
            })
            .map_err(|e| e.at_stage("tag"))?;
        let embeddings: Vec<Vec<f32>> = self
            .parallel(&summaries, |s| self.gateway.embed(s))
            .map_err(|e| e.at_stage("embed"))?;

        let mut units = Vec::with_capacity(parsed.elements.len());
        for (((el, summary), tags), embedding) in parsed
            .elements
            .iter()
            .zip(summaries)
            .zip(tags)
            .zip(embeddings)
        {
            units.push(KnowledgeUnit {
                unit_id: make_unit_id(&hash, &el.element_id).map_err(|e| e.at_stage("upsert"))?,
                doc_id: doc_id.clone(),
                version,
                element_id: el.element_id.clone(),
                summary,
                tags,
                embedding,
                provenance: Provenance {
                    uri: meta.uri.clone(),
                    span: el.span,
                    effective_date: meta.effective_date,
                },
            });
        }
        let unit_ids: Vec<UnitId> = units.iter().map(|u| u.unit_id.clone()).collect();
        let n = units.len();

        let entry = VersionEntry {
            version,
            effective_date: meta.effective_date,
            content_hash: Some(hash.clone()),
        };
        self.index
            .commit_version(&doc_id, entry, units)
            .map_err(|e| e.at_stage("upsert"))?;
        if let Err(e) = self.index.persist(&self.config.index_dir()) {
            self.index.remove_version(&doc_id, version);
            return Err(e.at_stage("persist"));
        }

        let mut cost = bundle.ledger.clone();
        let unit = |r| self.gateway.unit_cost(r).unwrap_or(0.0);
        cost.absorb(&CostLedger::from_counts(&[
            (ModelRole::Tagging, n, unit(ModelRole::Tagging)),
            (ModelRole::Embedding, n, unit(ModelRole::Embedding)),
        ]));
        let units_by_kind = ElementKind::ALL
            .iter()
            .map(|k| (*k, parsed.count_kind(*k)))
            .collect();
        tracing::info!(doc_id = %doc_id, version, units = n, "ingested");
        Ok(IngestReport {
            doc_id,
            version,
            status: IngestStatus::Created,
            content_hash: hash,
            unit_count: n,
            units_by_kind,
            unit_ids,
            summary: bundle.final_summary,
            cost,
            warnings,
        })
    }

    /// Order-preserving map over `items`, spread across up to
    /// `gateway.max_concurrent` worker threads.
    fn parallel<T: Send>(
        &self,
        items: &[String],
        f: impl Fn(&str) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let workers = self.config.gateway.max_concurrent.clamp(1, 16);
        if items.len() < 2 || workers == 1 {
            return items.iter().map(|s| f(s)).collect();
        }
        let chunk = items.len().div_ceil(workers);
        let results: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| {
                    let f = &f;
                    s.spawn(move || part.iter().map(|x| f(x)).collect::<Result<Vec<T>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ingest worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn query(&self, question: &str, opts: &QueryOptions) -> Result<QueryResponse> {
        if question.trim().is_empty() {
            return Err(Error::invalid("question must not be empty"));
        }
        let params = &self.config.engine;
        let decision = classify(question, params, opts.strategy.forced(), &self.gateway)
            .map_err(|e| e.at_stage("classify"))?;
        let base = Query {
            text: question.to_string(),
            k: opts.k.unwrap_or(params.k),
            as_of: opts.as_of,
            tag_filter: opts.tags.iter().map(|t| (t.facet, t.tag.clone())).collect(),
            mode: opts.mode,
        };
        let query_id = uuid::Uuid::new_v4().to_string();
        let mut trace = match decision.chosen {
            Strategy::SingleShot => run_single_shot(&query_id, &base, &self.index, &*self.gateway),
            Strategy::DeepResearch => {
                run_deep_research(&query_id, &base, &self.index, &*self.gateway, params)
            }
        }
        .map_err(|e| e.at_stage("retrieve"))?;
        trace.decision = Some(decision);

        let eq = enhance_question(
            question,
            &trace,
            &self.index,
            &self.gateway,
            params.context_limit,
        )
        .map_err(|e| e.at_stage("enhance"))?;
        let answer = generate_answer(&eq, &trace, &self.index, &self.gateway)
            .map_err(|e| e.at_stage("generate"))?;
        write_trace(&self.traces_dir(), &trace).map_err(|e| e.at_stage("trace"))?;
        tracing::info!(
            query_id = %query_id,
            hops = trace.hops.len(),
            citations = answer.citations.len(),
            "answered"
        );
        Ok(QueryResponse { answer, trace })
    }

    pub fn unit(&self, id: &str) -> Result<KnowledgeUnit> {
        self.index
            .get(&UnitId::new(id))
            .ok_or_else(|| Error::NotFound(format!("unit {id}")))
    }

    pub fn trace(&self, query_id: &str) -> Result<RetrievalTrace> {
        read_trace(&self.traces_dir(), query_id)
    }

    pub fn table1(&self) -> Result<Table1> {
        evalkit::reproduce(&Fixtures::embedded()?)
    }
}
