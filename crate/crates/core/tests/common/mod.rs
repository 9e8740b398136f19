#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

use qm_core::config::EngineConfig;
use qm_core::engine::{DocumentMeta, Engine, IngestReport};
use qm_core::model_gateway::Gateway;

pub const DIM: usize = 256;

#[derive(Debug, Deserialize)]
pub struct Manifest {
    pub documents: Vec<Entry>,
    pub chain: Chain,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Entry {
    pub file: String,
    pub uri: String,
    pub effective_date: NaiveDate,
}

#[derive(Debug, Deserialize)]
pub struct Chain {
    pub question: String,
    pub hop1_uri: String,
    pub hop2_uri: String,
}

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

pub fn manifest() -> Manifest {
    let raw = std::fs::read_to_string(corpus_dir().join("manifest.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

pub fn read(entry: &Entry) -> Vec<u8> {
    std::fs::read(corpus_dir().join(&entry.file)).unwrap()
}

pub fn offline_engine(store: &Path) -> Engine {
    let config = EngineConfig {
        dim: DIM,
        store_dir: store.to_path_buf(),
        ..EngineConfig::default()
    };
    Engine::with_gateway(config, Gateway::offline(DIM)).unwrap()
}

/// An engine with the whole corpus ingested in manifest order.
pub fn corpus_engine(store: &Path) -> (Engine, Vec<(Entry, IngestReport)>) {
    let engine = offline_engine(store);
    let mut reports = Vec::new();
    for e in manifest().documents {
        let meta = DocumentMeta {
            uri: e.uri.clone(),
            effective_date: e.effective_date,
            doc_id: None,
        };
        let r = engine.ingest(&read(&e), &meta).unwrap();
        reports.push((e, r));
    }
    (engine, reports)
}

pub mod gen {
    use chrono::NaiveDate;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use qm_core::knowledge_model::{
        DocId, ElementId, Facet, KnowledgeUnit, Provenance, Span, TagAssignment, UnitId,
    };
    use qm_core::model_gateway::Embedder;

    const WORDS: &[&str] = &[
        "momentum",
        "value",
        "liquidity",
        "spread",
        "volatility",
        "option",
        "premium",
        "factor",
        "returns",
        "stocks",
        "overnight",
        "intraday",
        "earnings",
        "sentiment",
        "lasso",
        "risk",
        "portfolio",
        "hedging",
        "variance",
        "data",
        "sample",
        "regression",
        "model",
        "china",
        "equity",
        "reversal",
        "alpha",
        "anomaly",
        "forecast",
        "pricing",
        "the",
        "of",
        "in",
    ];

    /// Returns a fixed vector for every text.
    pub struct FixedEmbedder(pub Vec<f32>);

    impl Embedder for FixedEmbedder {
        fn embed(&self, _: &str) -> qm_core::Result<Vec<f32>> {
            Ok(self.0.clone())
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
    }

    pub fn sentence<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
        let n = rng.gen_range(min..=max);
        let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
        format!("{}.", words.join(" "))
    }

    /// Coarse components make exact cosine ties common.
    pub fn vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
        if rng.gen_bool(0.5) {
            (0..dim).map(|_| rng.gen_range(-1i8..=1) as f32).collect()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        }
    }

    pub fn unit<R: Rng>(rng: &mut R, i: usize, dim: usize, embedding: Vec<f32>) -> KnowledgeUnit {
        KnowledgeUnit {
            unit_id: UnitId::new(format!(
                "u{:05}",
                rng.gen_range(0..100_000) * 1000 + i % 1000
            )),
            doc_id: DocId::new(format!("doc{}", i % 17)),
            version: 1,
            element_id: ElementId::new(format!("e{i}")),
            summary: sentence(rng, 3, 12),
            tags: vec![TagAssignment {
                facet: Facet::PrimaryArea,
                tag: "factor-investing".into(),
                confidence: rng.gen_range(0.0..=1.0),
            }],
            embedding: if embedding.is_empty() {
                vector(rng, dim)
            } else {
                embedding
            },
            provenance: Provenance {
                uri: format!("mem://doc{}", i % 17),
                span: Span::new(0, 10),
                effective_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            },
        }
    }

    /// `n` units, about a tenth of them sharing a vector with an earlier unit.
    pub fn corpus<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<KnowledgeUnit> {
        let mut out: Vec<KnowledgeUnit> = Vec::with_capacity(n);
        let mut seen = std::collections::BTreeSet::new();
        let mut i = 0;
        while out.len() < n {
            let emb = if !out.is_empty() && rng.gen_bool(0.1) {
                out[rng.gen_range(0..out.len())].embedding.clone()
            } else {
                Vec::new()
            };
            let u = unit(rng, i, dim, emb);
            i += 1;
            if seen.insert(u.unit_id.clone()) {
                out.push(u);
            }
        }
        out
    }

    pub fn exact_cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }

    /// Exhaustive ranking: every unit scored, descending score, ascending id on ties.
    pub fn brute_force(units: &[KnowledgeUnit], q: &[f32], k: usize) -> Vec<(UnitId, f64)> {
        let mut all: Vec<(UnitId, f64)> = units
            .iter()
            .map(|u| (u.unit_id.clone(), exact_cosine(q, &u.embedding)))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// Markdown with exactly `sections` headed sections.
    pub fn sectioned_document<R: Rng>(rng: &mut R, sections: usize) -> String {
        let mut doc = String::new();
        for s in 0..sections {
            doc.push_str(&format!("# Section {s}\n\n"));
            for _ in 0..rng.gen_range(1..=3) {
                doc.push_str(&sentence(rng, 4, 20));
                doc.push_str("\n\n");
            }
        }
        doc
    }
}

pub fn parse_markdown(text: &str) -> qm_core::knowledge_model::ParsedDocument {
    let doc = qm_core::knowledge_model::SourceDocument::new(
        qm_core::knowledge_model::DocId::new("d"),
        "mem://d",
        text,
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        1,
        chrono::Utc::now(),
    );
    qm_core::parser::parse(&doc).unwrap()
}
