//! Acceptance suite: one test per criterion, all offline with the deterministic
//! stubs. Tolerances are pinned in the constants below.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qm_core::answer_generator::{bind_citations, parse_markers, AnswerFlag};
use qm_core::engine::{QueryOptions, StrategyChoice};
use qm_core::evalkit::{self, condition_of, Condition, Fixtures};
use qm_core::knowledge_index::{KnowledgeIndex, Query, RetrievalMode};
use qm_core::knowledge_model::{DocId, Facet, UnitId};
use qm_core::model_gateway::offline::{CheapStub, PowerfulStub};
use qm_core::model_gateway::{Gateway, ModelRole, RetryPolicy};
use qm_core::retrieval_engine::{run_deep_research, run_single_shot, RetrievalParams};
use qm_core::summarizer::{self, DEFAULT_SEGMENT_BUDGET, DEFAULT_SEPARATOR};
use qm_core::tagger::{self, Taxonomy};

use common::gen;

const MEAN_TOL: f64 = 0.01;
const UX_MEAN_TOL: f64 = 0.005;

// Target quality figures: n, means, and the two headline differences.
const QUALITY_N: [(Condition, usize); 3] =
    [(Condition::W, 66), (Condition::B, 68), (Condition::C, 66)];
const QUALITY_MEAN: [(Condition, f64); 3] = [
    (Condition::W, 3.11),
    (Condition::B, 3.82),
    (Condition::C, 4.25),
];
const C_MINUS_W: f64 = 1.14;
const C_MINUS_B: f64 = 0.43;

const UX_LV2: f64 = 3.75;
const UX_LV3: f64 = 4.125;
const UX_IMPROVEMENT: f64 = 0.37;
/// Summary-level UX means, which the per-row table does not reproduce.
const UX_SUMMARY_LEVEL: (f64, f64) = (3.78, 4.21);

/// Expected assignment matrix, transcribed separately from the CSV. Rows are participants.
const ASSIGNMENT: [[char; 6]; 6] = [
    ['W', 'W', 'B', 'B', 'C', 'C'],
    ['W', 'B', 'B', 'C', 'C', 'W'],
    ['B', 'B', 'C', 'C', 'W', 'W'],
    ['B', 'C', 'C', 'W', 'W', 'B'],
    ['C', 'C', 'W', 'W', 'B', 'B'],
    ['C', 'W', 'W', 'B', 'B', 'C'],
];

fn report(n: u32, what: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("criterion {n}: PASS {what}");
    } else {
        println!("criterion {n}: FAIL {what}");
        for f in failures {
            println!("  {f}");
        }
        panic!("criterion {n} failed with {} problem(s)", failures.len());
    }
}

fn close(failures: &mut Vec<String>, label: &str, got: f64, want: f64, tol: f64) {
    if (got - want).abs() > tol {
        failures.push(format!("{label}: got {got:.4}, want {want} ± {tol}"));
    }
}

#[test]
fn criterion_01_table1_quality() {
    let started = Instant::now();
    let table = evalkit::reproduce(&Fixtures::embedded().unwrap()).unwrap();
    let elapsed = started.elapsed();

    let mut failures = Vec::new();
    for (c, n) in QUALITY_N {
        let got = table.quality.by_condition[&c].n;
        if got != n {
            failures.push(format!("n[{}]: got {got}, want {n}", c.code()));
        }
    }
    for (c, m) in QUALITY_MEAN {
        close(
            &mut failures,
            &format!("mean[{}]", c.code()),
            table.quality.mean(c),
            m,
            MEAN_TOL,
        );
    }
    close(&mut failures, "C - W", table.c_minus_w, C_MINUS_W, MEAN_TOL);
    close(&mut failures, "C - B", table.c_minus_b, C_MINUS_B, MEAN_TOL);
    if elapsed >= Duration::from_secs(1) {
        failures.push(format!("runtime {elapsed:?} >= 1s"));
    }
    report(1, "answer-quality descriptive statistics", &failures);
}

#[test]
fn criterion_02_ux_per_row_values() {
    let fx = Fixtures::embedded().unwrap();
    let ux = evalkit::aggregate_ux(&fx.ux).unwrap();
    let mut failures = Vec::new();
    close(
        &mut failures,
        "Lv2 mean",
        ux.by_level[&2].stats.mean,
        UX_LV2,
        UX_MEAN_TOL,
    );
    close(
        &mut failures,
        "Lv3 mean",
        ux.by_level[&3].stats.mean,
        UX_LV3,
        UX_MEAN_TOL,
    );
    close(
        &mut failures,
        "improvement",
        ux.improvement,
        UX_IMPROVEMENT,
        MEAN_TOL,
    );
    if fx.ux.len() != 24 {
        failures.push(format!("{} UX rows, want 24", fx.ux.len()));
    }
    for (i, r) in fx.ux.iter().enumerate() {
        let dims = r.dimensions();
        let mean = dims.iter().map(|d| f64::from(*d)).sum::<f64>() / dims.len() as f64;
        if r.average != mean {
            failures.push(format!("row {}: average {} != {mean}", i + 1, r.average));
        }
    }
    // Known difference with the summary-level figures, asserted rather than reconciled.
    if (ux.by_level[&2].stats.mean - UX_SUMMARY_LEVEL.0).abs() <= UX_MEAN_TOL
        || (ux.by_level[&3].stats.mean - UX_SUMMARY_LEVEL.1).abs() <= UX_MEAN_TOL
    {
        failures.push(
            "summary-level UX means unexpectedly reproduced; recorded difference is stale".into(),
        );
    }
    report(2, "UX means from the per-row table", &failures);
}

#[test]
fn criterion_03_latin_square() {
    let fx = Fixtures::embedded().unwrap();
    let mut failures = Vec::new();
    for (p, row) in ASSIGNMENT.iter().enumerate() {
        for (k, want) in row.iter().enumerate() {
            let got = condition_of(p + 1, k + 1, &fx.matrix).unwrap();
            if got.code() != *want {
                failures.push(format!(
                    "participant {} paper {}: {} != {want}",
                    p + 1,
                    k + 1,
                    got.code()
                ));
            }
        }
        for c in Condition::ALL {
            if fx.matrix.row_count(p + 1, c) != 2 {
                failures.push(format!(
                    "participant {} has {} x {}",
                    p + 1,
                    fx.matrix.row_count(p + 1, c),
                    c.code()
                ));
            }
        }
    }
    for c in Condition::ALL {
        if fx.matrix.count(c) != 12 {
            failures.push(format!(
                "{} assigned {} times",
                c.code(),
                fx.matrix.count(c)
            ));
        }
    }
    report(
        3,
        "36 assignment cells, 12 per condition, 2 per row",
        &failures,
    );
}

#[test]
fn criterion_04_two_tier_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let mut outside = 0;
    for case in 0..1000 {
        let n = rng.gen_range(2..=50);
        let cheap: f64 = rng.gen_range(0.01..5.0);
        let powerful: f64 = cheap * rng.gen_range(1.001..40.0);
        let doc = common::parse_markdown(&gen::sectioned_document(&mut rng, n));
        let gw = Gateway::new(16, 8, RetryPolicy::default())
            .with_backend(ModelRole::Cheap, std::sync::Arc::new(CheapStub), cheap)
            .with_backend(
                ModelRole::Powerful,
                std::sync::Arc::new(PowerfulStub),
                powerful,
            );
        let b =
            summarizer::summarize(&doc, &gw, DEFAULT_SEGMENT_BUDGET, DEFAULT_SEPARATOR).unwrap();
        let l = &b.ledger;
        let nf = n as f64;
        if l.invocations(ModelRole::Cheap) != n || l.invocations(ModelRole::Powerful) != 1 {
            failures.push(format!(
                "case {case}: invocations ({}, {}) for n = {n}",
                l.invocations(ModelRole::Cheap),
                l.invocations(ModelRole::Powerful)
            ));
        }
        if l.grand_total != nf * cheap + powerful {
            failures.push(format!(
                "case {case}: total {} != {}",
                l.grand_total,
                nf * cheap + powerful
            ));
        }
        // n·c + p < n·p holds exactly when c < p·(n − 1)/n; beyond that it is false for any ledger.
        if cheap < powerful * (nf - 1.0) / nf {
            if l.grand_total >= nf * powerful {
                failures.push(format!(
                    "case {case}: total {} >= n*powerful {}",
                    l.grand_total,
                    nf * powerful
                ));
            }
        } else {
            outside += 1;
        }
    }
    println!("cost cases where cheap >= powerful*(n-1)/n (inequality not implied): {outside}");
    report(4, "1000 randomized ledgers", &failures);
}

#[test]
fn criterion_05_retrieval_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 256;
    let mut failures = Vec::new();
    for corpus in 0..50 {
        let n = if corpus % 10 == 0 {
            1000
        } else {
            rng.gen_range(1..=1000)
        };
        let units = gen::corpus(&mut rng, n, dim);
        let idx = KnowledgeIndex::new(dim, None);
        idx.upsert_batch(units.clone()).unwrap();
        for qn in 0..20 {
            let q = if qn % 4 == 0 {
                units.choose(&mut rng).unwrap().embedding.clone()
            } else {
                gen::vector(&mut rng, dim)
            };
            let k = rng.gen_range(1..=n.min(50));
            let got: Vec<(UnitId, f64)> = idx
                .retrieve(&Query::new("q", k), &gen::FixedEmbedder(q.clone()))
                .unwrap()
                .into_iter()
                .map(|h| (h.unit_id, h.score))
                .collect();
            if got != gen::brute_force(&units, &q, k) {
                failures.push(format!("corpus {corpus} ({n} units) query {qn} k {k}"));
            }
        }
    }
    let elapsed = started.elapsed();
    if elapsed >= Duration::from_secs(60) {
        failures.push(format!("runtime {elapsed:?} >= 60s"));
    }
    report(
        5,
        "semantic retrieval equals exhaustive cosine ranking",
        &failures,
    );
}

#[test]
fn criterion_06_point_in_time() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, _) = common::corpus_engine(dir.path());
    let k = engine.index().len();
    let mut dates: BTreeMap<String, Vec<NaiveDate>> = BTreeMap::new();
    for e in common::manifest().documents {
        dates.entry(e.uri).or_default().push(e.effective_date);
    }
    let mut failures = Vec::new();
    let mut checked = 0;
    for (uri, ds) in dates.iter().filter(|(_, d)| d.len() == 2) {
        let (d1, d2) = (ds[0], ds[1]);
        let doc = DocId::new(uri);
        let span = (d2 - d1).num_days() as u64;
        let probes: Vec<(NaiveDate, Option<u32>)> = vec![
            (d1 - Days::new(1), None),
            (d1 - Days::new(365), None),
            (d1, Some(1)),
            (d1 + Days::new(span / 2), Some(1)),
            (d2 - Days::new(1), Some(1)),
            (d2, Some(2)),
            (d2 + Days::new(1), Some(2)),
            (d2 + Days::new(3650), Some(2)),
        ];
        for (as_of, want) in probes {
            for mode in [
                RetrievalMode::Semantic,
                RetrievalMode::Lexical,
                RetrievalMode::Hybrid,
            ] {
                let q = Query::new("returns factor volatility", k)
                    .as_of(as_of)
                    .mode(mode);
                let versions: BTreeSet<u32> = engine
                    .index()
                    .retrieve(&q, engine.gateway())
                    .unwrap()
                    .iter()
                    .map(|h| engine.index().get(&h.unit_id).unwrap())
                    .filter(|u| u.doc_id == doc)
                    .map(|u| u.version)
                    .collect();
                let ok = match want {
                    None => versions.is_empty(),
                    Some(v) if mode == RetrievalMode::Lexical => versions.iter().all(|x| *x == v),
                    Some(v) => versions == BTreeSet::from([v]),
                };
                checked += 1;
                if !ok {
                    failures.push(format!(
                        "{uri} as_of {as_of} {mode:?}: versions {versions:?}, want {want:?}"
                    ));
                }
            }
        }
    }
    if checked == 0 {
        failures.push("no two-version documents in the corpus".into());
    }
    report(
        6,
        "as-of retrieval over every two-version document",
        &failures,
    );
}

#[test]
fn criterion_07_multi_hop() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, _) = common::corpus_engine(dir.path());
    let chain = common::manifest().chain;
    let params = RetrievalParams {
        max_hops: 3,
        k: 8,
        ..RetrievalParams::default()
    };
    let q = Query::new(chain.question.clone(), 8).mode(RetrievalMode::Semantic);
    let uris = |ids: &[UnitId]| -> BTreeSet<String> {
        ids.iter()
            .map(|id| engine.index().get(id).unwrap().provenance.uri)
            .collect()
    };
    let single = run_single_shot("single", &q, engine.index(), engine.gateway()).unwrap();
    let deep = run_deep_research("deep", &q, engine.index(), engine.gateway(), &params).unwrap();

    let mut failures = Vec::new();
    if uris(&single.final_context).contains(&chain.hop2_uri) {
        failures.push("single-shot already reaches the hop-2 document".into());
    }
    if !uris(&deep.final_context).contains(&chain.hop2_uri) {
        failures.push("deep research misses the hop-2 document".into());
    }
    for hop in &deep.hops {
        if !hop.hop_query.contains(&chain.question) {
            failures.push(format!(
                "hop {} query does not contain the question",
                hop.hop_index
            ));
        }
    }
    failures.extend(deep.check());
    report(7, "planted two-hop chain", &failures);
}

#[test]
fn criterion_08_auditability() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, reports) = common::corpus_engine(dir.path());
    let lens: BTreeMap<(String, u32), usize> = reports
        .iter()
        .map(|(e, r)| ((e.uri.clone(), r.version), common::read(e).len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    let mut cited = 0;
    for i in 0..100 {
        let question = gen::sentence(&mut rng, 3, 14);
        let opts = QueryOptions {
            strategy: *[
                StrategyChoice::Auto,
                StrategyChoice::Single,
                StrategyChoice::Deep,
            ]
            .choose(&mut rng)
            .unwrap(),
            k: Some(rng.gen_range(1..=12)),
            mode: *[
                RetrievalMode::Semantic,
                RetrievalMode::Lexical,
                RetrievalMode::Hybrid,
            ]
            .choose(&mut rng)
            .unwrap(),
            ..QueryOptions::default()
        };
        let res = engine.query(&question, &opts).unwrap();
        if res.answer.has_flag(AnswerFlag::DanglingCitation) || !res.answer.rejected.is_empty() {
            failures.push(format!(
                "query {i}: dangling citations {:?}",
                res.answer.rejected
            ));
        }
        for c in &res.answer.citations {
            cited += 1;
            match engine.unit(c.unit_id.as_str()) {
                Ok(u) => {
                    let len = lens[&(u.provenance.uri.clone(), u.version)];
                    if !u.provenance.span.within(len) || u.provenance.span.is_empty() {
                        failures.push(format!(
                            "query {i}: span {:?} outside {len} bytes",
                            u.provenance.span
                        ));
                    }
                }
                Err(e) => failures.push(format!("query {i}: {} does not resolve: {e}", c.unit_id)),
            }
        }
        if engine.trace(&res.trace.query_id).ok().as_ref() != Some(&res.trace) {
            failures.push(format!("query {i}: trace does not round-trip"));
        }
    }
    if cited == 0 {
        failures.push("no citations produced at all".into());
    }

    // Randomized marker placement.
    for case in 0..1000 {
        let mut raw = String::new();
        let mut ids = Vec::new();
        for _ in 0..rng.gen_range(0..10) {
            raw.push_str(&gen::sentence(&mut rng, 0, 8));
            if rng.gen_bool(0.6) {
                let id = format!("u{:x}", rng.gen::<u64>());
                raw.push_str(&format!(
                    "{}[[unit:{id}]]",
                    if rng.gen_bool(0.5) { " " } else { "" }
                ));
                ids.push(UnitId::new(id));
            }
        }
        let (display, markers) = parse_markers(&raw);
        let got: Vec<UnitId> = markers.iter().map(|m| UnitId::new(&m.unit_id)).collect();
        let ans = bind_citations(&raw, &ids, "t");
        if got != ids || display.contains("[[") || ans.citations.len() != ids.len() {
            failures.push(format!("marker case {case}: {raw:?}"));
        }
        for m in &markers {
            if m.claim_end > display.len() || m.claim_start > m.claim_end {
                failures.push(format!(
                    "marker case {case}: claim {}..{}",
                    m.claim_start, m.claim_end
                ));
            }
        }
    }
    println!("citations checked: {cited}");
    report(8, "citations resolve inside their sources", &failures);
}

#[test]
fn criterion_09_tagging_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, _) = common::corpus_engine(dir.path());
    let mut failures = Vec::new();
    let ids = engine
        .index()
        .read(|s| s.units.keys().cloned().collect::<Vec<_>>());
    for id in &ids {
        let u = engine.index().get(id).unwrap();
        let primary = u
            .tags
            .iter()
            .filter(|t| t.facet == Facet::PrimaryArea)
            .count();
        if primary != 1 {
            failures.push(format!("{id}: {primary} primary areas"));
        }
        for t in &u.tags {
            if !(0.0..=1.0).contains(&t.confidence) {
                failures.push(format!("{id}: {}={} out of range", t.tag, t.confidence));
            }
        }
    }

    let base = Taxonomy::default();
    let gw = Gateway::offline(16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..200 {
        let content = gen::sentence(&mut rng, 1, 40);
        let factor = 10f64.powf(rng.gen_range(-3.0..3.0));
        let argmax = |tax: &Taxonomy| -> Vec<(Facet, String)> {
            tagger::tag(&content, tax, &gw, 0.0)
                .unwrap()
                .into_iter()
                .filter(|t| t.facet == Facet::PrimaryArea)
                .map(|t| (t.facet, t.tag))
                .collect()
        };
        let (a, b) = (argmax(&base), argmax(&base.rescaled(factor)));
        if a != b || a.len() != 1 {
            failures.push(format!("case {case} (x{factor:.4}): {a:?} vs {b:?}"));
        }
    }
    println!("units checked: {}", ids.len());
    report(
        9,
        "confidence range, single primary area, rescale invariance",
        &failures,
    );
}

#[test]
fn criterion_10_persistence() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dim = 256;
    let gw = Gateway::offline(dim);
    let idx = KnowledgeIndex::new(dim, None);
    let mut units = gen::corpus(&mut rng, 500, dim);
    for u in units.iter_mut().step_by(2) {
        u.embedding = gw.embed(&u.summary).unwrap();
    }
    idx.upsert_batch(units).unwrap();
    let dir = tempfile::tempdir().unwrap();
    idx.persist(dir.path()).unwrap();
    let loaded = KnowledgeIndex::load(dir.path(), dim, None).unwrap();

    let mut failures = Vec::new();
    for qn in 0..20 {
        let text = gen::sentence(&mut rng, 2, 10);
        for mode in [
            RetrievalMode::Semantic,
            RetrievalMode::Lexical,
            RetrievalMode::Hybrid,
        ] {
            let q = Query::new(text.clone(), 25).mode(mode);
            let bits = |i: &KnowledgeIndex| -> Vec<(UnitId, u64, usize)> {
                i.retrieve(&q, &gw)
                    .unwrap()
                    .into_iter()
                    .map(|h| (h.unit_id, h.score.to_bits(), h.rank))
                    .collect()
            };
            if bits(&idx) != bits(&loaded) {
                failures.push(format!("query {qn} {mode:?} differs after reload"));
            }
        }
    }
    report(
        10,
        "persist/load keeps ranked lists bit-identical",
        &failures,
    );
}
