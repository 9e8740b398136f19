//! User-study apparatus: condition assignment, judge prompts and descriptive
//! statistics recomputed from the raw score tables shipped under `fixtures/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PARTICIPANTS: usize = 6;
pub const PAPERS: usize = 6;

pub const LATIN_SQUARE_FILE: &str = "latin_square.csv";
pub const QUALITY_FILE: &str = "quality_raw.csv";
pub const UX_FILE: &str = "ux_raw.csv";
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

const EMBEDDED_LATIN: &str = include_str!("../fixtures/latin_square.csv");
const EMBEDDED_QUALITY: &str = include_str!("../fixtures/quality_raw.csv");
const EMBEDDED_UX: &str = include_str!("../fixtures/ux_raw.csv");
const EMBEDDED_SUMS: &str = include_str!("../fixtures/SHA256SUMS");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Unassisted.
    W,
    /// Generic assistant.
    B,
    /// Knowledge engine.
    C,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::W, Condition::B, Condition::C];

    pub fn code(self) -> char {
        match self {
            Condition::W => 'W',
            Condition::B => 'B',
            Condition::C => 'C',
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::W => "Without AI",
            Condition::B => "Generic assistant",
            Condition::C => "Knowledge engine",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s.trim() {
            "W" => Some(Condition::W),
            "B" => Some(Condition::B),
            "C" => Some(Condition::C),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Participants × papers → condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub cells: [[Condition; PAPERS]; PARTICIPANTS],
}

impl AssignmentMatrix {
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows: Vec<[Condition; PAPERS]> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{LATIN_SQUARE_FILE}: {e}")))?;
            if rec.len() != PAPERS + 1 {
                return Err(Error::Data(format!(
                    "{LATIN_SQUARE_FILE} row {}: expected {} fields",
                    i + 1,
                    PAPERS + 1
                )));
            }
            let participant: usize = rec[0].parse().map_err(|_| {
                Error::Data(format!(
                    "{LATIN_SQUARE_FILE} row {}: bad participant",
                    i + 1
                ))
            })?;
            if participant != i + 1 {
                return Err(Error::Data(format!(
                    "{LATIN_SQUARE_FILE} row {}: participant {participant} out of order",
                    i + 1
                )));
            }
            let mut row = [Condition::W; PAPERS];
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = Condition::from_code(&rec[j + 1]).ok_or_else(|| {
                    Error::Data(format!(
                        "{LATIN_SQUARE_FILE} row {}: unknown condition `{}`",
                        i + 1,
                        &rec[j + 1]
                    ))
                })?;
            }
            rows.push(row);
        }
        let cells: [[Condition; PAPERS]; PARTICIPANTS] = rows.try_into().map_err(|r: Vec<_>| {
            Error::Data(format!(
                "{LATIN_SQUARE_FILE}: expected {PARTICIPANTS} rows, found {}",
                r.len()
            ))
        })?;
        Ok(Self { cells })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("participant");
        for p in 1..=PAPERS {
            let _ = write!(out, ",paper_{p}");
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn count(&self, condition: Condition) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| **c == condition)
            .count()
    }

    pub fn row_count(&self, participant: usize, condition: Condition) -> usize {
        self.cells[participant - 1]
            .iter()
            .filter(|c| **c == condition)
            .count()
    }

    pub fn column_count(&self, paper: usize, condition: Condition) -> usize {
        self.cells
            .iter()
            .filter(|row| row[paper - 1] == condition)
            .count()
    }
}

/// Condition for a 1-based participant and paper.
pub fn condition_of(
    participant: usize,
    paper: usize,
    matrix: &AssignmentMatrix,
) -> Result<Condition> {
    if !(1..=PARTICIPANTS).contains(&participant) || !(1..=PAPERS).contains(&paper) {
        return Err(Error::invalid(format!(
            "participant {participant} / paper {paper} outside 1..={PARTICIPANTS} / 1..={PAPERS}"
        )));
    }
    Ok(matrix.cells[participant - 1][paper - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: u32,
    pub paper_id: usize,
    pub participant: usize,
    /// `None` marks a missing answer.
    pub score: Option<f64>,
}

pub fn parse_quality_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut keys = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{QUALITY_FILE}: {e}")))?;
        if rec.len() != PARTICIPANTS + 2 {
            return Err(Error::Data(format!(
                "{QUALITY_FILE} line {line}: wrong field count"
            )));
        }
        let bad = |what: &str| Error::Data(format!("{QUALITY_FILE} line {line}: bad {what}"));
        let question_id: u32 = rec[0].parse().map_err(|_| bad("question_id"))?;
        let paper_id: usize = rec[1].parse().map_err(|_| bad("paper_id"))?;
        for p in 1..=PARTICIPANTS {
            let cell = rec[p + 1].trim();
            let score = if cell.is_empty() {
                None
            } else {
                let v: f64 = cell.parse().map_err(|_| bad("score"))?;
                if !(0.0..=5.0).contains(&v) {
                    return Err(bad("score (outside [0, 5])"));
                }
                Some(v)
            };
            if !keys.insert((question_id, p)) {
                return Err(Error::Data(format!(
                    "{QUALITY_FILE} line {line}: duplicate question {question_id}, participant {p}"
                )));
            }
            out.push(ScoreRecord {
                question_id,
                paper_id,
                participant: p,
                score,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`parse_quality_csv`] for records grouped by question in
/// participant order.
pub fn quality_to_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from("question_id,paper_id");
    for p in 1..=PARTICIPANTS {
        let _ = write!(out, ",participant_{p}");
    }
    out.push('\n');
    for chunk in records.chunks(PARTICIPANTS) {
        let _ = write!(out, "{},{}", chunk[0].question_id, chunk[0].paper_id);
        for r in chunk {
            match r.score {
                Some(s) => {
                    let _ = write!(out, ",{s:.1}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UxRecord {
    pub participant: usize,
    pub paper_id: usize,
    pub assistance_level: u8,
    pub relevance: u8,
    pub accuracy: u8,
    pub helpfulness: u8,
    pub clarity: u8,
    pub average: f64,
}

impl UxRecord {
    pub fn dimensions(&self) -> [u8; 4] {
        [
            self.relevance,
            self.accuracy,
            self.helpfulness,
            self.clarity,
        ]
    }

    pub fn dimension_mean(&self) -> f64 {
        self.dimensions().iter().map(|d| f64::from(*d)).sum::<f64>() / 4.0
    }
}

pub const UX_DIMENSIONS: [&str; 4] = ["relevance", "accuracy", "helpfulness", "clarity"];

pub fn parse_ux_csv(text: &str) -> Result<Vec<UxRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{UX_FILE}: {e}")))?;
        if rec.len() != 8 {
            return Err(Error::Data(format!(
                "{UX_FILE} line {line}: wrong field count"
            )));
        }
        let bad = |what: &str| Error::Data(format!("{UX_FILE} line {line}: bad {what}"));
        let int = |i: usize, what: &str| rec[i].trim().parse::<u8>().map_err(|_| bad(what));
        let r = UxRecord {
            participant: int(0, "subject")?.into(),
            paper_id: int(1, "paper_id")?.into(),
            assistance_level: int(2, "assistance_level")?,
            relevance: int(3, "relevance")?,
            accuracy: int(4, "accuracy")?,
            helpfulness: int(5, "helpfulness")?,
            clarity: int(6, "clarity")?,
            average: rec[7].trim().parse().map_err(|_| bad("average"))?,
        };
        if r.dimensions().iter().any(|d| !(1..=5).contains(d)) {
            return Err(bad("rating (outside 1..=5)"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn ux_to_csv(records: &[UxRecord]) -> String {
    let mut out = String::from(
        "subject,paper_id,assistance_level,relevance,accuracy,helpfulness,clarity,average\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.participant,
            r.paper_id,
            r.assistance_level,
            r.relevance,
            r.accuracy,
            r.helpfulness,
            r.clarity,
            r.average
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    pub matrix: AssignmentMatrix,
    pub quality: Vec<ScoreRecord>,
    pub ux: Vec<UxRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_sums(sums: &str, files: &[(&str, &[u8])]) -> Result<()> {
    let expected: BTreeMap<&str, &str> = sums
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, f)| (f.trim(), h.trim()))
        .collect();
    for (name, bytes) in files {
        let want = expected
            .get(name)
            .ok_or_else(|| Error::Data(format!("{CHECKSUM_FILE} has no entry for {name}")))?;
        let got = sha256_hex(bytes);
        if &got != want {
            return Err(Error::Data(format!(
                "{name}: checksum {got} does not match {want}"
            )));
        }
    }
    Ok(())
}

impl Fixtures {
    fn parse(latin: &str, quality: &str, ux: &str) -> Result<Self> {
        Ok(Self {
            matrix: AssignmentMatrix::parse_csv(latin)?,
            quality: parse_quality_csv(quality)?,
            ux: parse_ux_csv(ux)?,
        })
    }

    /// The tables compiled into the crate, verified against their checksums.
    pub fn embedded() -> Result<Self> {
        check_sums(
            EMBEDDED_SUMS,
            &[
                (LATIN_SQUARE_FILE, EMBEDDED_LATIN.as_bytes()),
                (QUALITY_FILE, EMBEDDED_QUALITY.as_bytes()),
                (UX_FILE, EMBEDDED_UX.as_bytes()),
            ],
        )?;
        Self::parse(EMBEDDED_LATIN, EMBEDDED_QUALITY, EMBEDDED_UX)
    }

    /// Loads the three CSVs from `dir`. When `dir` holds a `SHA256SUMS` file
    /// every table must match it.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Data(format!("{}: {e}", dir.join(name).display())))
        };
        let (latin, quality, ux) = (
            read(LATIN_SQUARE_FILE)?,
            read(QUALITY_FILE)?,
            read(UX_FILE)?,
        );
        let sums_path = dir.join(CHECKSUM_FILE);
        if sums_path.exists() {
            check_sums(
                &fs::read_to_string(sums_path)?,
                &[
                    (LATIN_SQUARE_FILE, latin.as_bytes()),
                    (QUALITY_FILE, quality.as_bytes()),
                    (UX_FILE, ux.as_bytes()),
                ],
            )?;
        }
        Self::parse(&latin, &quality, &ux)
    }

    pub fn embedded_csv() -> [(&'static str, &'static str); 3] {
        [
            (LATIN_SQUARE_FILE, EMBEDDED_LATIN),
            (QUALITY_FILE, EMBEDDED_QUALITY),
            (UX_FILE, EMBEDDED_UX),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 when n < 2.
    pub sd: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Stats {
            n,
            mean,
            sd,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub by_condition: BTreeMap<Condition, Stats>,
    /// Records without a score.
    pub missing: usize,
}

impl QualitySummary {
    pub fn mean(&self, c: Condition) -> f64 {
        self.by_condition.get(&c).map_or(f64::NAN, |s| s.mean)
    }

    /// Raw difference of condition means, `a − b`.
    pub fn difference(&self, a: Condition, b: Condition) -> f64 {
        self.mean(a) - self.mean(b)
    }
}

pub fn aggregate_quality(
    records: &[ScoreRecord],
    matrix: &AssignmentMatrix,
) -> Result<QualitySummary> {
    let mut groups: BTreeMap<Condition, Vec<f64>> = BTreeMap::new();
    let mut offenders = Vec::new();
    let mut missing = 0;
    for r in records {
        match condition_of(r.participant, r.paper_id, matrix) {
            Ok(c) => match r.score {
                Some(s) => groups.entry(c).or_default().push(s),
                None => missing += 1,
            },
            Err(_) => offenders.push(format!(
                "question {} participant {} paper {}",
                r.question_id, r.participant, r.paper_id
            )),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Data(format!(
            "records without an assigned condition: {}",
            offenders.join("; ")
        )));
    }
    Ok(QualitySummary {
        by_condition: groups
            .into_iter()
            .filter_map(|(c, v)| Stats::of(&v).map(|s| (c, s)))
            .collect(),
        missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UxLevel {
    pub stats: Stats,
    /// Mean per dimension, in [`UX_DIMENSIONS`] order.
    pub dimension_means: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UxSummary {
    pub by_level: BTreeMap<u8, UxLevel>,
    /// Level 3 mean minus level 2 mean.
    pub improvement: f64,
}

pub fn aggregate_ux(records: &[UxRecord]) -> Result<UxSummary> {
    let mut offenders = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if !matches!(r.assistance_level, 2 | 3) {
            offenders.push(format!(
                "row {}: assistance level {}",
                i + 1,
                r.assistance_level
            ));
        }
        if (r.average - r.dimension_mean()).abs() > 1e-9 {
            offenders.push(format!(
                "row {}: average {} != dimension mean {}",
                i + 1,
                r.average,
                r.dimension_mean()
            ));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Data(offenders.join("; ")));
    }
    let mut by_level = BTreeMap::new();
    for level in [2u8, 3] {
        let rows: Vec<&UxRecord> = records
            .iter()
            .filter(|r| r.assistance_level == level)
            .collect();
        let averages: Vec<f64> = rows.iter().map(|r| r.average).collect();
        if let Some(stats) = Stats::of(&averages) {
            let mut dimension_means = [0.0; 4];
            for (d, m) in dimension_means.iter_mut().enumerate() {
                *m = rows
                    .iter()
                    .map(|r| f64::from(r.dimensions()[d]))
                    .sum::<f64>()
                    / rows.len() as f64;
            }
            by_level.insert(
                level,
                UxLevel {
                    stats,
                    dimension_means,
                },
            );
        }
    }
    let mean = |l: u8| {
        by_level
            .get(&l)
            .map_or(f64::NAN, |x: &UxLevel| x.stats.mean)
    };
    let improvement = mean(3) - mean(2);
    Ok(UxSummary {
        by_level,
        improvement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub quality: QualitySummary,
    pub c_minus_w: f64,
    pub c_minus_b: f64,
    pub b_minus_w: f64,
    pub ux: UxSummary,
}

pub fn reproduce(fixtures: &Fixtures) -> Result<Table1> {
    let quality = aggregate_quality(&fixtures.quality, &fixtures.matrix)?;
    let ux = aggregate_ux(&fixtures.ux)?;
    Ok(Table1 {
        c_minus_w: quality.difference(Condition::C, Condition::W),
        c_minus_b: quality.difference(Condition::C, Condition::B),
        b_minus_w: quality.difference(Condition::B, Condition::W),
        quality,
        ux,
    })
}

impl Table1 {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Answer quality");
        let _ = writeln!(
            out,
            "{:<20} {:>4} {:>7} {:>7} {:>7} {:>5} {:>5}",
            "condition", "n", "mean", "sd", "median", "min", "max"
        );
        for (c, s) in &self.quality.by_condition {
            let _ = writeln!(
                out,
                "{:<20} {:>4} {:>7.3} {:>7.3} {:>7.2} {:>5.1} {:>5.1}",
                c.label(),
                s.n,
                s.mean,
                s.sd,
                s.median,
                s.min,
                s.max
            );
        }
        let _ = writeln!(out, "missing answers: {}", self.quality.missing);
        let _ = writeln!(out, "C - W: {:+.3}", self.c_minus_w);
        let _ = writeln!(out, "C - B: {:+.3}", self.c_minus_b);
        let _ = writeln!(out, "B - W: {:+.3}", self.b_minus_w);
        let _ = writeln!(out);
        let _ = writeln!(out, "User experience");
        let _ = writeln!(
            out,
            "{:<6} {:>3} {:>7} {:>7} {:>10} {:>9} {:>12} {:>8}",
            "level", "n", "mean", "sd", "relevance", "accuracy", "helpfulness", "clarity"
        );
        for (level, l) in &self.ux.by_level {
            let d = l.dimension_means;
            let _ = writeln!(
                out,
                "Lv{:<4} {:>3} {:>7.3} {:>7.3} {:>10.3} {:>9.3} {:>12.3} {:>8.3}",
                level, l.stats.n, l.stats.mean, l.stats.sd, d[0], d[1], d[2], d[3]
            );
        }
        let _ = writeln!(out, "improvement: {:+.3}", self.ux.improvement);
        out
    }
}

const JUDGE_TEMPLATE: &str = "Please evaluate the quality of answers from the following 6 participants for the same academic question.

Paper Context: {paper_context}
Question: {question_text}
Answers: {formatted_answers}

Please rate each participant's answer on a scale of 1\u{2013}5 (with one decimal point allowed) based on the following criteria:
Scoring Criteria:
1 point: Answer is completely irrelevant, incorrect, or incomprehensible
2 points: Answer is mostly irrelevant, showing little understanding of the question
3 points: Answer is partially relevant with some understanding but lacks depth
4 points: Answer is relevant with reasonable depth and clear logic
5 points: Answer is highly relevant, demonstrates deep analysis, rigorous logic, and unique insights
Note:
- For participants marked as \"No response,\" please return \"No response\"
- Only rate participants who provided substantive answers

Please return the scoring results in the following format:
Participant 1: X.X points
Participant 2: X.X points
Participant 3: X.X points
Participant 4: X.X points
Participant 5: X.X points
Participant 6: X.X points

Please ensure that your evaluations are objective and impartial, based on the content quality, logical coherence, and relevance of each answer.";

pub const NO_RESPONSE: &str = "No response";

/// Fills the judge template. Blank or absent answers render as "No response".
pub fn build_judge_prompt(
    paper_context: &str,
    question: &str,
    answers: &[Option<String>],
) -> Result<String> {
    if answers.len() != PARTICIPANTS {
        return Err(Error::invalid(format!(
            "expected {PARTICIPANTS} answer slots, got {}",
            answers.len()
        )));
    }
    let mut formatted = String::new();
    for (i, a) in answers.iter().enumerate() {
        let body = match a.as_deref().map(str::trim) {
            Some(s) if !s.is_empty() => s,
            _ => NO_RESPONSE,
        };
        let _ = write!(formatted, "\nParticipant {}: {body}", i + 1);
    }
    Ok(JUDGE_TEMPLATE
        .replace("{paper_context}", paper_context)
        .replace("{question_text}", question)
        .replace("{formatted_answers}", &formatted))
}

fn judge_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)^\**\s*participant\s+(\d+)\s*\**\s*:\s*\**\s*(?:(\d+(?:\.\d+)?)\s*points?|"?(no response)"?)\s*\.?\s*\**$"#,
        )
        .unwrap()
    })
}

/// Reads `Participant N: X.X points` lines. Returns one slot per participant;
/// `None` means "No response". Lines not starting with "Participant" are ignored.
pub fn parse_judge_response(text: &str) -> Result<[Option<f64>; PARTICIPANTS]> {
    let mut slots: [Option<Option<f64>>; PARTICIPANTS] = [None; PARTICIPANTS];
    let mut mentioned = [false; PARTICIPANTS];
    let mut bad = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let looks_like = line
            .trim_start_matches('*')
            .trim_start()
            .to_ascii_lowercase()
            .starts_with("participant");
        if !looks_like {
            continue;
        }
        let Some(cap) = judge_line_re().captures(line) else {
            bad.push(line.to_string());
            continue;
        };
        let idx: usize = cap[1].parse().unwrap_or(0);
        if !(1..=PARTICIPANTS).contains(&idx) || mentioned[idx - 1] {
            bad.push(line.to_string());
            continue;
        }
        mentioned[idx - 1] = true;
        let value = match cap.get(2) {
            Some(m) => {
                let v: f64 = m.as_str().parse().unwrap_or(f64::NAN);
                if !(1.0..=5.0).contains(&v) {
                    bad.push(line.to_string());
                    continue;
                }
                Some(v)
            }
            None => None,
        };
        slots[idx - 1] = Some(value);
    }
    for (i, seen) in mentioned.iter().enumerate() {
        if !seen {
            bad.push(format!("<missing line for participant {}>", i + 1));
        }
    }
    if !bad.is_empty() {
        return Err(Error::JudgeParse { lines: bad });
    }
    Ok(slots.map(|s| s.flatten()))
}
