//! Multi-modal parsing of structured text into text, figure/table and
//! formula elements plus a heading tree.
//!
//! The baseline backend reads Markdown-like text. Recognition precedence is
//! formula, then figure/table, then text: math regions are carved out first,
//! and table/caption/paragraph detection only runs on what remains.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_model::{
    ElementId, ElementKind, ModalElement, ParsedDocument, SemanticStructure, SourceDocument, Span,
    StructureNode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Markdown,
    PlainText,
}

/// A parsing implementation. Every backend must return output that satisfies
/// the `ParsedDocument` invariants (sorted, disjoint spans inside the document).
pub trait ParserBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> &[InputKind];
    fn parse(&self, doc: &SourceDocument) -> Result<ParsedDocument>;
}

pub fn backend_by_name(name: &str) -> Result<Box<dyn ParserBackend>> {
    match name {
        "baseline" => Ok(Box::new(BaselineParser)),
        other => Err(Error::config(
            "parser.backend",
            format!("unknown parser backend `{other}`"),
        )),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineParser;

impl ParserBackend for BaselineParser {
    fn name(&self) -> &str {
        "baseline"
    }

    fn capabilities(&self) -> &[InputKind] {
        &[InputKind::Markdown, InputKind::PlainText]
    }

    fn parse(&self, doc: &SourceDocument) -> Result<ParsedDocument> {
        parse(doc)
    }
}

pub fn parse(doc: &SourceDocument) -> Result<ParsedDocument> {
    let text = doc.text()?;
    let mut parsed = ParsedDocument::empty(doc.doc_id.clone(), doc.version);
    if text.trim().is_empty() {
        return Ok(parsed);
    }

    let mut drafts = Vec::new();
    let mut cursor = 0;
    for block in find_blocks(text) {
        scan_lines(text, cursor, block.start, &mut drafts);
        if let Some(d) = Draft::trimmed(text, block.start, block.end, block.kind, None) {
            drafts.push(d);
        }
        cursor = block.end;
    }
    scan_lines(text, cursor, text.len(), &mut drafts);
    drafts.sort_by_key(|d| d.span.byte_start);

    let mut structure = SemanticStructure::default();
    let mut stack = vec![0usize];
    for (i, draft) in drafts.into_iter().enumerate() {
        let element_id = ElementId(format!("e{i}"));
        if let Some(level) = draft.heading_level {
            while stack.len() > 1 && structure.nodes[*stack.last().unwrap()].level >= level {
                stack.pop();
            }
            let parent = *stack.last().unwrap();
            let node = StructureNode {
                heading_text: draft.content.clone(),
                depth: structure.nodes[parent].depth + 1,
                level,
                element_ids: Vec::new(),
                parent: Some(parent),
                children: Vec::new(),
            };
            structure.nodes.push(node);
            let idx = structure.nodes.len() - 1;
            structure.nodes[parent].children.push(idx);
            stack.push(idx);
        }
        let owner = *stack.last().unwrap();
        structure.nodes[owner].element_ids.push(element_id.clone());
        parsed.elements.push(ModalElement {
            element_id,
            kind: draft.kind,
            content: draft.content,
            span: draft.span,
            order_index: i as u32,
        });
    }
    parsed.structure = structure;
    Ok(parsed)
}

struct Draft {
    kind: ElementKind,
    content: String,
    span: Span,
    heading_level: Option<u32>,
}

impl Draft {
    /// A draft covering `text[start..end]` with surrounding whitespace trimmed
    /// off the span; the content is the verbatim trimmed slice.
    fn trimmed(
        text: &str,
        start: usize,
        end: usize,
        kind: ElementKind,
        heading_level: Option<u32>,
    ) -> Option<Draft> {
        let slice = &text[start..end];
        let lead = slice.len() - slice.trim_start().len();
        let trail = slice.len() - slice.trim_end().len();
        if lead == slice.len() {
            return None;
        }
        let span = Span::new(start + lead, end - trail);
        Some(Draft {
            kind,
            content: text[span.byte_start..span.byte_end].to_owned(),
            span,
            heading_level,
        })
    }
}

struct Block {
    start: usize,
    end: usize,
    kind: ElementKind,
}

fn block_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"(?ms)",
            r"(?P<mathfence>^[ \t]*```[ \t]*math[ \t]*\n.*?^[ \t]*```[ \t]*$)",
            r"|(?P<codefence>^[ \t]*```[^\n]*\n.*?^[ \t]*```[ \t]*$)",
            r"|(?P<display>\$\$.+?\$\$)",
            r"|(?P<bracket>\\\[.+?\\\])",
        ))
        .unwrap()
    })
}

/// Math regions and fenced code blocks, leftmost-first and non-overlapping.
/// A code fence swallows anything that looks like math inside it.
fn find_blocks(text: &str) -> Vec<Block> {
    block_regex()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            let kind = if c.name("codefence").is_some() {
                ElementKind::Text
            } else {
                ElementKind::Formula
            };
            Block {
                start: m.start(),
                end: m.end(),
                kind,
            }
        })
        .collect()
}

fn hash_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(#{1,6})\s+(\S.*?)\s*#*\s*$").unwrap())
}

fn numbered_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+(?:\.\d+)*)\s+\S").unwrap())
}

fn caption_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:Figure|Fig\.|Table)\s+\d+[A-Za-z]?\s*[:.]").unwrap())
}

fn separator_row() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\|?\s*:?-+:?\s*(?:\|\s*:?-+:?\s*)+\|?\s*$").unwrap())
}

/// Heading level of a line, if it is one.
pub fn heading_level(line: &str) -> Option<(u32, String)> {
    if let Some(c) = hash_heading().captures(line) {
        return Some((c[1].len() as u32, c[2].to_owned()));
    }
    let trimmed = line.trim_end();
    numbered_heading().captures(trimmed).map(|c| {
        let level = c[1].matches('.').count() as u32 + 1;
        (level, trimmed.to_owned())
    })
}

/// Cells of a pipe row, with one optional leading and trailing pipe removed.
fn pipe_cells(line: &str) -> Option<Vec<String>> {
    let t = line.trim();
    if !t.contains('|') {
        return None;
    }
    let t = t.strip_prefix('|').unwrap_or(t);
    let t = t.strip_suffix('|').unwrap_or(t);
    Some(t.split('|').map(|c| c.trim().to_owned()).collect())
}

struct Line<'a> {
    start: usize,
    end: usize,
    text: &'a str,
    at_line_start: bool,
}

fn split_lines(text: &str, from: usize, to: usize) -> Vec<Line<'_>> {
    let mut lines = Vec::new();
    let mut pos = from;
    while pos < to {
        let rel_end = text[pos..to].find('\n').map(|i| pos + i).unwrap_or(to);
        lines.push(Line {
            start: pos,
            end: rel_end,
            text: &text[pos..rel_end],
            at_line_start: pos == 0 || text.as_bytes()[pos - 1] == b'\n',
        });
        pos = rel_end + 1;
    }
    lines
}

/// Classifies the lines of `text[from..to]` into headings, tables, captions
/// and paragraphs.
fn scan_lines(text: &str, from: usize, to: usize, out: &mut Vec<Draft>) {
    if from >= to {
        return;
    }
    let lines = split_lines(text, from, to);
    let mut para: Option<(usize, usize)> = None;
    let flush = |para: &mut Option<(usize, usize)>, out: &mut Vec<Draft>| {
        if let Some((s, e)) = para.take() {
            if let Some(mut d) = Draft::trimmed(text, s, e, ElementKind::Text, None) {
                d.content = collapse_lines(&d.content);
                out.push(d);
            }
        }
    };

    let mut i = 0;
    while i < lines.len() {
        let line = &lines[i];
        if line.text.trim().is_empty() {
            flush(&mut para, out);
            i += 1;
            continue;
        }
        if line.at_line_start {
            if let Some((level, title)) = heading_level(line.text) {
                flush(&mut para, out);
                if let Some(mut d) =
                    Draft::trimmed(text, line.start, line.end, ElementKind::Text, Some(level))
                {
                    d.content = title;
                    out.push(d);
                }
                i += 1;
                continue;
            }
            if let Some(consumed) = try_table(text, &lines[i..], out, &mut para, &flush) {
                i += consumed;
                continue;
            }
            if caption_line().is_match(line.text) {
                flush(&mut para, out);
                let mut j = i + 1;
                while j < lines.len() && continues_caption(&lines[j]) {
                    j += 1;
                }
                if let Some(mut d) = Draft::trimmed(
                    text,
                    line.start,
                    lines[j - 1].end,
                    ElementKind::FigureOrTable,
                    None,
                ) {
                    d.content = collapse_lines(&d.content);
                    out.push(d);
                }
                i = j;
                continue;
            }
        }
        para = Some(match para {
            Some((s, _)) => (s, line.end),
            None => (line.start, line.end),
        });
        i += 1;
    }
    flush(&mut para, out);
}

fn continues_caption(line: &Line<'_>) -> bool {
    !line.text.trim().is_empty()
        && heading_level(line.text).is_none()
        && !caption_line().is_match(line.text)
        && pipe_cells(line.text).is_none()
}

type Flush<'a> = dyn Fn(&mut Option<(usize, usize)>, &mut Vec<Draft>) + 'a;

/// Recognizes a pipe table starting at `lines[0]`: a header row with at least
/// two cells, a dash separator with the same column count, then body rows
/// with that column count. Returns the number of lines consumed.
fn try_table(
    text: &str,
    lines: &[Line<'_>],
    out: &mut Vec<Draft>,
    para: &mut Option<(usize, usize)>,
    flush: &Flush<'_>,
) -> Option<usize> {
    let header = pipe_cells(lines[0].text)?;
    if header.len() < 2 || lines.len() < 2 || !lines[1].at_line_start {
        return None;
    }
    if !separator_row().is_match(lines[1].text) {
        return None;
    }
    if pipe_cells(lines[1].text)?.len() != header.len() {
        return None;
    }
    let mut rows = vec![header.clone()];
    let mut j = 2;
    while j < lines.len() {
        match pipe_cells(lines[j].text) {
            Some(cells) if cells.len() == header.len() && !lines[j].text.trim().is_empty() => {
                rows.push(cells);
                j += 1;
            }
            _ => break,
        }
    }
    flush(para, out);
    let mut d = Draft::trimmed(
        text,
        lines[0].start,
        lines[j - 1].end,
        ElementKind::FigureOrTable,
        None,
    )?;
    d.content = rows
        .iter()
        .map(|r| r.join(" | "))
        .collect::<Vec<_>>()
        .join("\n");
    out.push(d);
    Some(j)
}

fn collapse_lines(s: &str) -> String {
    s.lines().map(str::trim).collect::<Vec<_>>().join(" ")
}

/// Byte accounting of how much of a document a parse covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub non_whitespace_bytes: usize,
    pub covered_bytes: usize,
    pub coverage: f64,
    pub overlaps: Vec<(ElementId, ElementId)>,
    pub invalid_spans: Vec<ElementId>,
}

impl CoverageReport {
    pub fn has_overlaps(&self) -> bool {
        !self.overlaps.is_empty()
    }
}

pub fn reconstruct(parsed: &ParsedDocument, original: &SourceDocument) -> Result<CoverageReport> {
    if parsed.doc_id != original.doc_id || parsed.version != original.version {
        return Err(Error::ProvenanceMismatch {
            parsed: format!("{}@v{}", parsed.doc_id, parsed.version),
            source_ref: original.label(),
        });
    }
    let bytes = &original.content;
    let mut covered = vec![false; bytes.len()];
    let mut invalid_spans = Vec::new();
    let mut ranges = Vec::new();
    for e in &parsed.elements {
        if !e.span.within(bytes.len()) {
            invalid_spans.push(e.element_id.clone());
        }
        let lo = e.span.byte_start.min(e.span.byte_end).min(bytes.len());
        let hi = e.span.byte_start.max(e.span.byte_end).min(bytes.len());
        covered[lo..hi].iter_mut().for_each(|c| *c = true);
        ranges.push((lo, hi, &e.element_id));
    }

    ranges.sort_by_key(|r| (r.0, r.1));
    let mut overlaps = Vec::new();
    for (i, a) in ranges.iter().enumerate() {
        for b in &ranges[i + 1..] {
            if b.0 >= a.1 {
                break;
            }
            overlaps.push((a.2.clone(), b.2.clone()));
        }
    }

    let mut non_ws = 0;
    let mut hit = 0;
    for (b, c) in bytes.iter().zip(&covered) {
        if !b.is_ascii_whitespace() {
            non_ws += 1;
            if *c {
                hit += 1;
            }
        }
    }
    let coverage = if non_ws == 0 {
        1.0
    } else {
        hit as f64 / non_ws as f64
    };
    Ok(CoverageReport {
        non_whitespace_bytes: non_ws,
        covered_bytes: hit,
        coverage,
        overlaps,
        invalid_spans,
    })
}
