//! The knowledge base: exact cosine kNN, IDF-weighted lexical matching and
//! reciprocal-rank fusion over stored units, with tag and point-in-time filters.
//!
//! On disk an index is a directory holding three files:
//!
//! * `units.jsonl`: one [`KnowledgeUnit`] per line, sorted by unit id;
//! * `vectors.qmvx`: a 16-byte header (`QMVX`, u32 dim, u64 rows, little
//!   endian) followed by `rows × dim` little-endian f32 values, row `i`
//!   belonging to line `i` of `units.jsonl`;
//! * `versions.jsonl`: one `{doc_id, version, effective_date, content_hash}`
//!   per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_model::{
    read_units_jsonl, validate_unit, write_units_jsonl, ContentHash, DocId, Facet, KnowledgeUnit,
    Provenance, UnitId,
};
use crate::model_gateway::Embedder;
use crate::tagger::Taxonomy;
use crate::text::tokens;

pub const UNITS_FILE: &str = "units.jsonl";
pub const VECTORS_FILE: &str = "vectors.qmvx";
pub const VERSIONS_FILE: &str = "versions.jsonl";
pub const VECTOR_MAGIC: &[u8; 4] = b"QMVX";
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    Semantic,
    Lexical,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub k: usize,
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
    #[serde(default)]
    pub tag_filter: Vec<(Facet, String)>,
    #[serde(default)]
    pub mode: RetrievalMode,
}

impl Query {
    pub fn new(text: impl Into<String>, k: usize) -> Self {
        Self {
            text: text.into(),
            k,
            as_of: None,
            tag_filter: Vec::new(),
            mode: RetrievalMode::Semantic,
        }
    }

    pub fn as_of(mut self, date: NaiveDate) -> Self {
        self.as_of = Some(date);
        self
    }

    pub fn mode(mut self, mode: RetrievalMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_tag(mut self, facet: Facet, tag: impl Into<String>) -> Self {
        self.tag_filter.push((facet, tag.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub unit_id: UnitId,
    pub score: f64,
    pub provenance: Provenance,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionEntry {
    pub version: u32,
    pub effective_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<ContentHash>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VersionLine {
    doc_id: DocId,
    #[serde(flatten)]
    entry: VersionEntry,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexSnapshot {
    pub units: BTreeMap<UnitId, KnowledgeUnit>,
    pub vectors: BTreeMap<UnitId, Vec<f32>>,
    pub lexical: BTreeMap<String, Vec<UnitId>>,
    pub version_map: BTreeMap<DocId, Vec<VersionEntry>>,
}

impl IndexSnapshot {
    fn register_version(&mut self, doc_id: &DocId, entry: VersionEntry) {
        let versions = self.version_map.entry(doc_id.clone()).or_default();
        match versions.binary_search_by_key(&entry.version, |v| v.version) {
            Ok(i) => {
                let hash = entry
                    .content_hash
                    .or_else(|| versions[i].content_hash.take());
                versions[i] = VersionEntry {
                    content_hash: hash,
                    ..entry
                };
            }
            Err(i) => versions.insert(i, entry),
        }
    }

    fn remove(&mut self, id: &UnitId) {
        if let Some(old) = self.units.remove(id) {
            self.vectors.remove(id);
            for tok in unit_terms(&old) {
                if let Some(list) = self.lexical.get_mut(&tok) {
                    if let Ok(i) = list.binary_search(id) {
                        list.remove(i);
                    }
                    if list.is_empty() {
                        self.lexical.remove(&tok);
                    }
                }
            }
        }
    }

    fn insert(&mut self, unit: KnowledgeUnit) -> bool {
        let id = unit.unit_id.clone();
        let replaced = self.units.contains_key(&id);
        self.remove(&id);
        for tok in unit_terms(&unit) {
            let list = self.lexical.entry(tok).or_default();
            if let Err(i) = list.binary_search(&id) {
                list.insert(i, id.clone());
            }
        }
        self.register_version(
            &unit.doc_id,
            VersionEntry {
                version: unit.version,
                effective_date: unit.provenance.effective_date,
                content_hash: None,
            },
        );
        self.vectors.insert(id.clone(), unit.embedding.clone());
        self.units.insert(id, unit);
        replaced
    }

    /// The version of `doc_id` visible at `as_of`: the highest version whose
    /// effective date is on or before `as_of`, or the latest one when no date
    /// is given.
    pub fn visible_version(&self, doc_id: &DocId, as_of: Option<NaiveDate>) -> Option<u32> {
        let versions = self.version_map.get(doc_id)?;
        match as_of {
            None => versions.last().map(|v| v.version),
            Some(date) => versions
                .iter()
                .filter(|v| v.effective_date <= date)
                .map(|v| v.version)
                .max(),
        }
    }

    fn eligible(&self, query: &Query) -> BTreeSet<&UnitId> {
        let mut visible: BTreeMap<&DocId, Option<u32>> = BTreeMap::new();
        self.units
            .values()
            .filter(|u| {
                let v = *visible
                    .entry(&u.doc_id)
                    .or_insert_with(|| self.visible_version(&u.doc_id, query.as_of));
                v == Some(u.version)
            })
            .filter(|u| query.tag_filter.iter().all(|(f, t)| u.has_tag(*f, t)))
            .map(|u| &u.unit_id)
            .collect()
    }
}

fn unit_terms(unit: &KnowledgeUnit) -> BTreeSet<String> {
    tokens(&unit.summary).collect()
}

/// Cosine similarity accumulated in f64, clamped to [-1, 1]. Zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn rank_desc(mut scored: Vec<(&UnitId, f64)>) -> Vec<(&UnitId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsertAck {
    pub unit_id: UnitId,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub units: usize,
    pub documents: usize,
    pub versions: usize,
    pub dim: usize,
    pub vocabulary: usize,
}

pub struct KnowledgeIndex {
    dim: usize,
    taxonomy: Option<Arc<Taxonomy>>,
    state: RwLock<IndexSnapshot>,
}

impl std::fmt::Debug for KnowledgeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeIndex")
            .field("dim", &self.dim)
            .field("units", &self.len())
            .finish()
    }
}

impl KnowledgeIndex {
    pub fn new(dim: usize, taxonomy: Option<Arc<Taxonomy>>) -> Self {
        Self {
            dim,
            taxonomy,
            state: RwLock::new(IndexSnapshot::default()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.state.read().units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &UnitId) -> Option<KnowledgeUnit> {
        self.state.read().units.get(id).cloned()
    }

    pub fn units_of(&self, doc_id: &DocId, version: u32) -> Vec<KnowledgeUnit> {
        self.state
            .read()
            .units
            .values()
            .filter(|u| &u.doc_id == doc_id && u.version == version)
            .cloned()
            .collect()
    }

    /// Runs `f` against a consistent view of the index.
    pub fn read<T>(&self, f: impl FnOnce(&IndexSnapshot) -> T) -> T {
        f(&self.state.read())
    }

    fn check(&self, unit: &KnowledgeUnit) -> Result<()> {
        let report = validate_unit(unit, self.dim, self.taxonomy.as_deref());
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(report))
        }
    }

    pub fn upsert(&self, unit: KnowledgeUnit) -> Result<UpsertAck> {
        self.check(&unit)?;
        let unit_id = unit.unit_id.clone();
        let replaced = self.state.write().insert(unit);
        Ok(UpsertAck { unit_id, replaced })
    }

    /// Validates every unit first, then applies all of them under one write
    /// lock. Either all units become visible or none do.
    pub fn upsert_batch(&self, units: Vec<KnowledgeUnit>) -> Result<Vec<UpsertAck>> {
        for u in &units {
            self.check(u)?;
        }
        let mut state = self.state.write();
        Ok(units
            .into_iter()
            .map(|u| {
                let unit_id = u.unit_id.clone();
                let replaced = state.insert(u);
                UpsertAck { unit_id, replaced }
            })
            .collect())
    }

    /// Records a document version that may have no units (e.g. an emptied
    /// document), so that it still shadows older versions.
    pub fn register_version(&self, doc_id: &DocId, entry: VersionEntry) {
        self.state.write().register_version(doc_id, entry);
    }

    /// Registers a document version together with all of its units under one
    /// write lock, after validating every unit.
    pub fn commit_version(
        &self,
        doc_id: &DocId,
        entry: VersionEntry,
        units: Vec<KnowledgeUnit>,
    ) -> Result<Vec<UpsertAck>> {
        for u in &units {
            self.check(u)?;
            if &u.doc_id != doc_id || u.version != entry.version {
                return Err(Error::invalid(format!(
                    "unit {} belongs to {} v{}, not {doc_id} v{}",
                    u.unit_id, u.doc_id, u.version, entry.version
                )));
            }
        }
        let mut state = self.state.write();
        state.register_version(doc_id, entry);
        Ok(units
            .into_iter()
            .map(|u| {
                let unit_id = u.unit_id.clone();
                let replaced = state.insert(u);
                UpsertAck { unit_id, replaced }
            })
            .collect())
    }

    /// Removes a version and every unit it owns.
    pub fn remove_version(&self, doc_id: &DocId, version: u32) {
        let mut state = self.state.write();
        let ids: Vec<UnitId> = state
            .units
            .values()
            .filter(|u| &u.doc_id == doc_id && u.version == version)
            .map(|u| u.unit_id.clone())
            .collect();
        for id in &ids {
            state.remove(id);
        }
        if let Some(vs) = state.version_map.get_mut(doc_id) {
            vs.retain(|v| v.version != version);
            if vs.is_empty() {
                state.version_map.remove(doc_id);
            }
        }
    }

    pub fn latest_version(&self, doc_id: &DocId) -> Option<VersionEntry> {
        self.state
            .read()
            .version_map
            .get(doc_id)
            .and_then(|v| v.last().cloned())
    }

    pub fn versions(&self, doc_id: &DocId) -> Vec<VersionEntry> {
        self.state
            .read()
            .version_map
            .get(doc_id)
            .cloned()
            .unwrap_or_default()
    }

    pub fn retrieve(&self, query: &Query, embedder: &dyn Embedder) -> Result<Vec<ScoredHit>> {
        if query.k < 1 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let state = self.state.read();
        if state.units.is_empty() {
            return Ok(Vec::new());
        }
        let eligible = state.eligible(query);
        if eligible.is_empty() {
            return Ok(Vec::new());
        }

        let semantic = |state: &IndexSnapshot| -> Result<Vec<(UnitId, f64)>> {
            let qv = embedder.embed(&query.text)?;
            if qv.len() != self.dim {
                return Err(Error::invalid(format!(
                    "query embedding has dimension {} (index uses {})",
                    qv.len(),
                    self.dim
                )));
            }
            let scored = eligible
                .iter()
                .map(|id| (*id, cosine(&qv, &state.vectors[*id])))
                .collect();
            Ok(rank_desc(scored)
                .into_iter()
                .map(|(id, s)| (id.clone(), s))
                .collect())
        };

        let lexical = |state: &IndexSnapshot| -> Vec<(UnitId, f64)> {
            let n = state.units.len() as f64;
            let mut acc: BTreeMap<&UnitId, f64> = BTreeMap::new();
            for term in tokens(&query.text).collect::<BTreeSet<_>>() {
                if let Some(postings) = state.lexical.get(&term) {
                    let idf = (1.0 + n / postings.len() as f64).ln();
                    for id in postings.iter().filter(|id| eligible.contains(id)) {
                        *acc.entry(id).or_insert(0.0) += idf;
                    }
                }
            }
            rank_desc(acc.into_iter().collect())
                .into_iter()
                .map(|(id, s)| (id.clone(), s))
                .collect()
        };

        let ranked: Vec<(UnitId, f64)> = match query.mode {
            RetrievalMode::Semantic => semantic(&state)?,
            RetrievalMode::Lexical => lexical(&state),
            RetrievalMode::Hybrid => {
                let mut fused: BTreeMap<UnitId, f64> = BTreeMap::new();
                for list in [semantic(&state)?, lexical(&state)] {
                    for (rank, (id, _)) in list.into_iter().enumerate() {
                        *fused.entry(id).or_insert(0.0) += 1.0 / (RRF_K + (rank + 1) as f64);
                    }
                }
                let mut v: Vec<(UnitId, f64)> = fused.into_iter().collect();
                v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                v
            }
        };

        Ok(ranked
            .into_iter()
            .take(query.k)
            .enumerate()
            .map(|(i, (id, score))| ScoredHit {
                provenance: state.units[&id].provenance.clone(),
                unit_id: id,
                score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn stats(&self) -> IndexStats {
        let s = self.state.read();
        IndexStats {
            units: s.units.len(),
            documents: s.version_map.len(),
            versions: s.version_map.values().map(Vec::len).sum(),
            dim: self.dim,
            vocabulary: s.lexical.len(),
        }
    }

    /// Checks the internal invariants and returns a description of each
    /// problem found. An empty list means the index is consistent.
    pub fn verify(&self) -> Vec<String> {
        let s = self.state.read();
        let mut problems = Vec::new();
        for (id, unit) in &s.units {
            if &unit.unit_id != id {
                problems.push(format!("unit stored under {id} has id {}", unit.unit_id));
            }
            let report = validate_unit(unit, self.dim, self.taxonomy.as_deref());
            if !report.is_valid() {
                problems.push(format!("unit {id}: {report}"));
            }
            match s.vectors.get(id) {
                Some(v) if v == &unit.embedding => {}
                Some(_) => problems.push(format!("unit {id}: vector table disagrees with unit")),
                None => problems.push(format!("unit {id}: missing from vector table")),
            }
            let known = s
                .version_map
                .get(&unit.doc_id)
                .is_some_and(|vs| vs.iter().any(|v| v.version == unit.version));
            if !known {
                problems.push(format!(
                    "unit {id}: version {} not in version map",
                    unit.version
                ));
            }
        }
        for id in s.vectors.keys() {
            if !s.units.contains_key(id) {
                problems.push(format!("vector table has orphan {id}"));
            }
        }
        for (term, list) in &s.lexical {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                problems.push(format!("posting list for `{term}` is not strictly sorted"));
            }
            for id in list {
                if !s.units.contains_key(id) {
                    problems.push(format!("posting list for `{term}` has orphan {id}"));
                }
            }
        }
        for (doc, versions) in &s.version_map {
            if versions.windows(2).any(|w| w[0].version >= w[1].version) {
                problems.push(format!("version map for {doc} is not monotone"));
            }
        }
        problems
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = self.state.read();

        write_atomically(&dir.join(UNITS_FILE), |w| {
            write_units_jsonl(w, s.units.values())
        })?;

        write_atomically(&dir.join(VECTORS_FILE), |w| {
            w.write_all(VECTOR_MAGIC)?;
            w.write_all(&(self.dim as u32).to_le_bytes())?;
            w.write_all(&(s.units.len() as u64).to_le_bytes())?;
            for id in s.units.keys() {
                for x in &s.vectors[id] {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Ok(())
        })?;

        write_atomically(&dir.join(VERSIONS_FILE), |w| {
            for (doc_id, versions) in &s.version_map {
                for v in versions {
                    let line = VersionLine {
                        doc_id: doc_id.clone(),
                        entry: v.clone(),
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
            Ok(())
        })
    }

    pub fn load(dir: &Path, dim: usize, taxonomy: Option<Arc<Taxonomy>>) -> Result<Self> {
        let units_path = dir.join(UNITS_FILE);
        let mut units = read_units_jsonl(
            BufReader::new(File::open(&units_path)?),
            &units_path.display().to_string(),
        )?;
        let vectors = read_vectors(&dir.join(VECTORS_FILE), dim, units.len())?;
        for (unit, v) in units.iter_mut().zip(vectors) {
            unit.embedding = v;
        }

        let mut snapshot = IndexSnapshot::default();
        let versions_path = dir.join(VERSIONS_FILE);
        if versions_path.exists() {
            let raw = fs::read(&versions_path)?;
            let mut offset = 0u64;
            for line in raw.split(|b| *b == b'\n') {
                if !line.iter().all(u8::is_ascii_whitespace) {
                    let v: VersionLine =
                        serde_json::from_slice(line).map_err(|e| Error::Format {
                            file: versions_path.display().to_string(),
                            offset,
                            message: e.to_string(),
                        })?;
                    snapshot.register_version(&v.doc_id, v.entry);
                }
                offset += line.len() as u64 + 1;
            }
        }

        let index = Self {
            dim,
            taxonomy,
            state: RwLock::new(snapshot),
        };
        index.upsert_batch(units)?;
        Ok(index)
    }
}

fn write_atomically(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_vectors(path: &Path, dim: usize, expected_rows: usize) -> Result<Vec<Vec<f32>>> {
    let file = path.display().to_string();
    let fail = |offset: u64, message: String| Error::Format {
        file: file.clone(),
        offset,
        message,
    };
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 16 {
        return Err(fail(raw.len() as u64, "truncated header".into()));
    }
    if &raw[..4] != VECTOR_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let file_dim = u32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
    if file_dim != dim {
        return Err(fail(
            4,
            format!("dimension {file_dim} does not match configured {dim}"),
        ));
    }
    let rows = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if rows != expected_rows {
        return Err(fail(
            8,
            format!("{rows} vector rows but {expected_rows} units"),
        ));
    }
    let need = 16 + rows * dim * 4;
    if raw.len() != need {
        return Err(fail(
            raw.len().min(need) as u64,
            format!("expected {need} bytes, found {}", raw.len()),
        ));
    }
    Ok(raw[16..]
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect())
}
