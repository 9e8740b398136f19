//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once constructed. Identifiers are
//! content-derived so that re-running ingestion over the same bytes yields the
//! same unit IDs across processes.

use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tagger::Taxonomy;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }
    };
}

string_id!(
    /// Stable identifier of a source document across all of its versions.
    DocId
);
string_id!(
    /// Identifier of a modal element, unique within one parsed document.
    ElementId
);
string_id!(UnitId);
string_id!(
    /// Hex-encoded SHA-256 digest of document content.
    ContentHash
);

impl ContentHash {
    pub fn of(content: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(content)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: DocId,
    pub uri: String,
    pub content: Vec<u8>,
    pub content_hash: ContentHash,
    pub ingested_at: DateTime<Utc>,
    pub effective_date: NaiveDate,
    pub version: u32,
}

impl SourceDocument {
    pub fn new(
        doc_id: DocId,
        uri: impl Into<String>,
        content: impl Into<Vec<u8>>,
        effective_date: NaiveDate,
        version: u32,
        ingested_at: DateTime<Utc>,
    ) -> Self {
        let content = content.into();
        let content_hash = ContentHash::of(&content);
        Self {
            doc_id,
            uri: uri.into(),
            content,
            content_hash,
            ingested_at,
            effective_date,
            version,
        }
    }

    /// The content as text, or an encoding error pointing at the first bad byte.
    pub fn text(&self) -> Result<&str> {
        std::str::from_utf8(&self.content).map_err(|e| Error::Encoding {
            offset: e.valid_up_to(),
        })
    }

    pub fn label(&self) -> String {
        format!("{}@v{}", self.doc_id, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Text,
    FigureOrTable,
    Formula,
}

impl ElementKind {
    pub const ALL: [ElementKind; 3] = [
        ElementKind::Text,
        ElementKind::FigureOrTable,
        ElementKind::Formula,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Text => "text",
            ElementKind::FigureOrTable => "figure_or_table",
            ElementKind::Formula => "formula",
        }
    }
}

/// Half-open byte range `[byte_start, byte_end)` into a source document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub byte_start: usize,
    pub byte_end: usize,
}

impl Span {
    pub fn new(byte_start: usize, byte_end: usize) -> Self {
        Self {
            byte_start,
            byte_end,
        }
    }

    pub fn len(&self) -> usize {
        self.byte_end.saturating_sub(self.byte_start)
    }

    pub fn is_empty(&self) -> bool {
        self.byte_start >= self.byte_end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.byte_start < other.byte_end && other.byte_start < self.byte_end
    }

    pub fn within(&self, len: usize) -> bool {
        self.byte_start < self.byte_end && self.byte_end <= len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalElement {
    pub element_id: ElementId,
    pub kind: ElementKind,
    pub content: String,
    pub span: Span,
    pub order_index: u32,
}

/// One heading-delimited section. Node 0 is always the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureNode {
    pub heading_text: String,
    /// Tree depth: the root is 0 and every child is one deeper than its parent.
    pub depth: u32,
    /// Heading level as written (`#` count, or dot count + 1 for numbered headings).
    pub level: u32,
    pub element_ids: Vec<ElementId>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticStructure {
    pub nodes: Vec<StructureNode>,
}

impl Default for SemanticStructure {
    fn default() -> Self {
        Self {
            nodes: vec![StructureNode {
                heading_text: String::new(),
                depth: 0,
                level: 0,
                element_ids: Vec::new(),
                parent: None,
                children: Vec::new(),
            }],
        }
    }
}

impl SemanticStructure {
    pub fn root(&self) -> &StructureNode {
        &self.nodes[0]
    }

    /// Index of the node that owns `element_id`.
    pub fn node_of(&self, element_id: &ElementId) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.element_ids.iter().any(|e| e == element_id))
    }

    pub fn parent_heading(&self, element_id: &ElementId) -> Option<&StructureNode> {
        self.node_of(element_id).map(|i| &self.nodes[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDocument {
    pub doc_id: DocId,
    pub version: u32,
    pub elements: Vec<ModalElement>,
    pub structure: SemanticStructure,
}

impl ParsedDocument {
    pub fn empty(doc_id: DocId, version: u32) -> Self {
        Self {
            doc_id,
            version,
            elements: Vec::new(),
            structure: SemanticStructure::default(),
        }
    }

    pub fn count_kind(&self, kind: ElementKind) -> usize {
        self.elements.iter().filter(|e| e.kind == kind).count()
    }

    pub fn element(&self, id: &ElementId) -> Option<&ModalElement> {
        self.elements.iter().find(|e| &e.element_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    PrimaryArea,
    SecondaryTopic,
    MethodOrientation,
    ApplicationDomain,
}

impl Facet {
    pub const ALL: [Facet; 4] = [
        Facet::PrimaryArea,
        Facet::SecondaryTopic,
        Facet::MethodOrientation,
        Facet::ApplicationDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Facet::PrimaryArea => "primary_area",
            Facet::SecondaryTopic => "secondary_topic",
            Facet::MethodOrientation => "method_orientation",
            Facet::ApplicationDomain => "application_domain",
        }
    }

    pub fn parse(s: &str) -> Option<Facet> {
        Facet::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagAssignment {
    pub facet: Facet,
    pub tag: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub uri: String,
    pub span: Span,
    pub effective_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub unit_id: UnitId,
    pub doc_id: DocId,
    pub version: u32,
    pub element_id: ElementId,
    pub summary: String,
    pub tags: Vec<TagAssignment>,
    pub embedding: Vec<f32>,
    pub provenance: Provenance,
}

impl KnowledgeUnit {
    pub fn primary_area(&self) -> Option<&TagAssignment> {
        self.tags.iter().find(|t| t.facet == Facet::PrimaryArea)
    }

    pub fn has_tag(&self, facet: Facet, tag: &str) -> bool {
        self.tags.iter().any(|t| t.facet == facet && t.tag == tag)
    }
}

/// Derives a unit ID from the document content hash and the element ID.
///
/// The two inputs are length-prefixed before hashing so that no pair of
/// distinct inputs can produce the same pre-image.
pub fn make_unit_id(content_hash: &ContentHash, element_id: &ElementId) -> Result<UnitId> {
    if content_hash.as_str().is_empty() {
        return Err(Error::invalid("content hash must not be empty"));
    }
    if element_id.as_str().is_empty() {
        return Err(Error::invalid("element id must not be empty"));
    }
    let mut hasher = Sha256::new();
    for part in [content_hash.as_str(), element_id.as_str()] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    Ok(UnitId(format!("u{}", hex::encode(&digest[..16]))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DimensionMismatch {
        expected: usize,
        actual: usize,
    },
    NonFiniteEmbedding {
        index: usize,
    },
    ConfidenceOutOfRange {
        facet: Facet,
        tag: String,
        confidence: f64,
    },
    UnknownTag {
        facet: Facet,
        tag: String,
    },
    MultiplePrimaryAreas {
        count: usize,
    },
    InvalidSpan {
        byte_start: usize,
        byte_end: usize,
    },
    EmptyIdentifier {
        field: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| format!("{v:?}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Checks a unit against the engine-wide invariants. Violations are returned
/// as data; an empty report means the unit is valid.
pub fn validate_unit(
    unit: &KnowledgeUnit,
    dim: usize,
    taxonomy: Option<&Taxonomy>,
) -> ValidationReport {
    let mut violations = Vec::new();

    for (field, value) in [
        ("unit_id", unit.unit_id.as_str()),
        ("doc_id", unit.doc_id.as_str()),
        ("element_id", unit.element_id.as_str()),
    ] {
        if value.is_empty() {
            violations.push(Violation::EmptyIdentifier {
                field: field.to_owned(),
            });
        }
    }

    if unit.embedding.len() != dim {
        violations.push(Violation::DimensionMismatch {
            expected: dim,
            actual: unit.embedding.len(),
        });
    }
    if let Some(index) = unit.embedding.iter().position(|x| !x.is_finite()) {
        violations.push(Violation::NonFiniteEmbedding { index });
    }

    let mut primary = 0;
    for t in &unit.tags {
        if !(0.0..=1.0).contains(&t.confidence) {
            violations.push(Violation::ConfidenceOutOfRange {
                facet: t.facet,
                tag: t.tag.clone(),
                confidence: t.confidence,
            });
        }
        if let Some(tax) = taxonomy {
            if !tax.contains(t.facet, &t.tag) {
                violations.push(Violation::UnknownTag {
                    facet: t.facet,
                    tag: t.tag.clone(),
                });
            }
        }
        if t.facet == Facet::PrimaryArea {
            primary += 1;
        }
    }
    if primary > 1 {
        violations.push(Violation::MultiplePrimaryAreas { count: primary });
    }

    let span = unit.provenance.span;
    if span.byte_start >= span.byte_end {
        violations.push(Violation::InvalidSpan {
            byte_start: span.byte_start,
            byte_end: span.byte_end,
        });
    }

    ValidationReport { violations }
}

/// Writes units as JSON lines, one object per unit.
pub fn write_units_jsonl<'a, W: Write>(
    mut out: W,
    units: impl IntoIterator<Item = &'a KnowledgeUnit>,
) -> Result<()> {
    for unit in units {
        serde_json::to_writer(&mut out, unit)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON-lines units. Blank lines are skipped; a malformed line is
/// reported with the byte offset where it starts plus the column of the error.
pub fn read_units_jsonl<R: BufRead>(input: R, file: &str) -> Result<Vec<KnowledgeUnit>> {
    let mut units = Vec::new();
    let mut offset = 0u64;
    for line in input.split(b'\n') {
        let line = line?;
        let line_len = line.len() as u64 + 1;
        if !line.iter().all(u8::is_ascii_whitespace) {
            let unit: KnowledgeUnit = serde_json::from_slice(&line).map_err(|e| Error::Format {
                file: file.to_owned(),
                offset: offset + e.column().saturating_sub(1) as u64,
                message: e.to_string(),
            })?;
            units.push(unit);
        }
        offset += line_len;
    }
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_unit() -> KnowledgeUnit {
        KnowledgeUnit {
            unit_id: UnitId::new("u1"),
            doc_id: DocId::new("d1"),
            version: 1,
            element_id: ElementId::new("e0"),
            summary: "Momentum factor returns".into(),
            tags: vec![TagAssignment {
                facet: Facet::PrimaryArea,
                tag: "factor-investing".into(),
                confidence: 0.8,
            }],
            embedding: vec![1.0, 0.0, 0.0, 0.0],
            provenance: Provenance {
                uri: "file://a.md".into(),
                span: Span::new(0, 10),
                effective_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            },
        }
    }

    #[test]
    fn unit_id_is_deterministic() {
        let h = ContentHash::of(b"");
        let e = ElementId::new("e0");
        assert_eq!(make_unit_id(&h, &e).unwrap(), make_unit_id(&h, &e).unwrap());
    }

    #[test]
    fn unit_id_differs_on_hash() {
        let e = ElementId::new("e0");
        let a = make_unit_id(&ContentHash::of(b"a"), &e).unwrap();
        let b = make_unit_id(&ContentHash::of(b"b"), &e).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn unit_id_rejects_empty_inputs() {
        let h = ContentHash::of(b"x");
        assert!(matches!(
            make_unit_id(&h, &ElementId::new("")),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_unit_id(&ContentHash::new(""), &ElementId::new("e0")),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unit_ids_do_not_collide_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pairs = HashSet::new();
        while pairs.len() < 10_000 {
            let content: [u8; 8] = rng.gen();
            let element = format!("e{}", rng.gen_range(0..64));
            pairs.insert((ContentHash::of(&content), ElementId::new(element)));
        }
        let ids: HashSet<UnitId> = pairs
            .iter()
            .map(|(h, e)| make_unit_id(h, e).unwrap())
            .collect();
        assert_eq!(ids.len(), 10_000);
    }

    #[test]
    fn valid_unit_has_empty_report() {
        assert!(validate_unit(&sample_unit(), 4, None).is_valid());
    }

    #[test]
    fn confidence_out_of_range_is_reported() {
        let mut unit = sample_unit();
        unit.tags[0].confidence = 1.5;
        let report = validate_unit(&unit, 4, None);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::ConfidenceOutOfRange { .. }]
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let report = validate_unit(&sample_unit(), 256, None);
        assert_eq!(
            report.violations,
            vec![Violation::DimensionMismatch {
                expected: 256,
                actual: 4
            }]
        );
    }

    #[test]
    fn unknown_tag_and_duplicate_primary() {
        let mut unit = sample_unit();
        unit.tags.push(TagAssignment {
            facet: Facet::PrimaryArea,
            tag: "astrology".into(),
            confidence: 0.1,
        });
        let tax = Taxonomy::default();
        let report = validate_unit(&unit, 4, Some(&tax));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnknownTag { tag, .. } if tag == "astrology")));
        assert!(report
            .violations
            .contains(&Violation::MultiplePrimaryAreas { count: 2 }));
    }

    #[test]
    fn jsonl_round_trip() {
        let units = vec![sample_unit(), {
            let mut u = sample_unit();
            u.unit_id = UnitId::new("u2");
            u.embedding = vec![0.1, -0.25, 1e-7, f32::MIN_POSITIVE];
            u
        }];
        let mut buf = Vec::new();
        write_units_jsonl(&mut buf, &units).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"unit_id\":\"u1\""));
        assert!(text.contains("\"effective_date\":\"2020-01-01\""));
        let back = read_units_jsonl(&buf[..], "units.jsonl").unwrap();
        assert_eq!(back, units);
    }

    #[test]
    fn jsonl_error_carries_offset() {
        let mut buf = Vec::new();
        write_units_jsonl(&mut buf, [&sample_unit()]).unwrap();
        let first_len = buf.len() as u64;
        buf.extend_from_slice(b"{\"unit_id\": 3}\n");
        match read_units_jsonl(&buf[..], "units.jsonl") {
            Err(Error::Format { offset, .. }) => assert!(offset >= first_len),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn source_document_hash_is_content_derived() {
        let d = NaiveDate::from_ymd_opt(2021, 3, 4).unwrap();
        let a = SourceDocument::new(DocId::new("d"), "u", "abc", d, 1, Utc::now());
        let b = SourceDocument::new(DocId::new("d"), "u", "abc", d, 2, Utc::now());
        assert_eq!(a.content_hash, b.content_hash);
        let bad = SourceDocument::new(DocId::new("d"), "u", vec![b'a', 0xff], d, 1, Utc::now());
        assert!(matches!(bad.text(), Err(Error::Encoding { offset: 1 })));
    }
}
