//! Four-facet domain tagging with per-tag confidence in [0, 1].
//!
//! The tagging role receives the content together with every candidate tag
//! and returns a raw score per tag. Scores are clamped into [0, 1]; the
//! primary area is the facet argmax and the other facets keep every tag at or
//! above the confidence threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::knowledge_model::{Facet, TagAssignment};
use crate::model_gateway::{prompt, Gateway, ModelRole};
use crate::text::tokens;

pub const DEFAULT_THRESHOLD: f64 = 0.35;

/// A tag plus the weighted keywords the offline scorer looks for. A tag with
/// no explicit keywords is scored on the words of its own name.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSpec {
    pub tag: String,
    pub keywords: BTreeMap<String, f64>,
}

impl TagSpec {
    pub fn new(tag: &str, keywords: &[(&str, f64)]) -> Self {
        Self {
            tag: tag.to_owned(),
            keywords: keywords
                .iter()
                .map(|(k, w)| ((*k).to_owned(), *w))
                .collect(),
        }
    }

    pub fn effective_keywords(&self) -> BTreeMap<String, f64> {
        if !self.keywords.is_empty() {
            return self.keywords.clone();
        }
        tokens(&self.tag).map(|t| (t, 1.0)).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TagEntry {
    Name(String),
    Spec {
        tag: String,
        #[serde(default)]
        keywords: BTreeMap<String, f64>,
    },
}

impl Serialize for TagSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.keywords.is_empty() {
            TagEntry::Name(self.tag.clone()).serialize(s)
        } else {
            TagEntry::Spec {
                tag: self.tag.clone(),
                keywords: self.keywords.clone(),
            }
            .serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for TagSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match TagEntry::deserialize(d)? {
            TagEntry::Name(tag) => TagSpec {
                tag,
                keywords: BTreeMap::new(),
            },
            TagEntry::Spec { tag, keywords } => TagSpec { tag, keywords },
        })
    }
}

/// Per-facet tag vocabularies. On disk this is a JSON map from facet name to
/// a list of tags, each either a bare string or `{"tag": .., "keywords": {..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Taxonomy {
    pub facets: BTreeMap<Facet, Vec<TagSpec>>,
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let tax: Taxonomy = serde_json::from_str(&raw).map_err(|e| {
            Error::config("tagger.taxonomy_path", format!("{}: {e}", path.display()))
        })?;
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<()> {
        for facet in Facet::ALL {
            let key = format!("tagger.taxonomy.{facet}");
            let tags = self
                .facets
                .get(&facet)
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::config(&key, "facet vocabulary is empty"))?;
            let mut seen = BTreeSet::new();
            for t in tags {
                if t.tag.trim().is_empty() {
                    return Err(Error::config(&key, "empty tag name"));
                }
                if !seen.insert(t.tag.as_str()) {
                    return Err(Error::config(&key, format!("duplicate tag `{}`", t.tag)));
                }
                if t.keywords.values().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::config(
                        &key,
                        format!(
                            "tag `{}` has a negative or non-finite keyword weight",
                            t.tag
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn tags(&self, facet: Facet) -> &[TagSpec] {
        self.facets.get(&facet).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, facet: Facet, tag: &str) -> bool {
        self.tags(facet).iter().any(|t| t.tag == tag)
    }

    /// Multiplies every keyword weight by `factor`.
    pub fn rescaled(&self, factor: f64) -> Taxonomy {
        let mut out = self.clone();
        for specs in out.facets.values_mut() {
            for spec in specs.iter_mut() {
                spec.keywords = spec
                    .effective_keywords()
                    .into_iter()
                    .map(|(k, w)| (k, w * factor))
                    .collect();
            }
        }
        out
    }
}

impl Default for Taxonomy {
    /// Quantitative-finance vocabulary.
    fn default() -> Self {
        let primary = vec![
            TagSpec::new(
                "factor-investing",
                &[
                    ("factor", 1.0),
                    ("factors", 1.0),
                    ("anomaly", 1.0),
                    ("anomalies", 1.0),
                    ("premium", 1.0),
                    ("momentum", 1.0),
                    ("alpha", 1.0),
                    ("portfolio", 0.5),
                    ("portfolios", 0.5),
                ],
            ),
            TagSpec::new(
                "derivatives-pricing",
                &[
                    ("option", 1.0),
                    ("options", 1.0),
                    ("volatility", 1.0),
                    ("derivative", 1.0),
                    ("derivatives", 1.0),
                    ("strike", 1.0),
                    ("scholes", 1.0),
                    ("hedging", 1.0),
                    ("call", 0.5),
                ],
            ),
            TagSpec::new(
                "market-microstructure",
                &[
                    ("liquidity", 1.0),
                    ("spread", 1.0),
                    ("intraday", 1.0),
                    ("overnight", 1.0),
                    ("microstructure", 1.0),
                    ("bid", 1.0),
                    ("ask", 1.0),
                    ("volume", 0.5),
                    ("reversal", 1.0),
                    ("reversals", 1.0),
                ],
            ),
            TagSpec::new(
                "ml-for-finance",
                &[
                    ("machine", 1.0),
                    ("learning", 1.0),
                    ("lasso", 1.0),
                    ("neural", 1.0),
                    ("nowcasting", 1.0),
                    ("regularization", 1.0),
                    ("sparse", 1.0),
                    ("forecasting", 0.5),
                ],
            ),
            TagSpec::new(
                "behavioral-finance",
                &[
                    ("preference", 1.0),
                    ("preferences", 1.0),
                    ("behavioral", 1.0),
                    ("sentiment", 1.0),
                    ("investor", 0.5),
                    ("investors", 0.5),
                    ("aversion", 1.0),
                    ("reference", 0.5),
                ],
            ),
        ];
        let secondary = vec![
            TagSpec::new(
                "volatility-modeling",
                &[
                    ("volatility", 1.0),
                    ("variance", 1.0),
                    ("semivariance", 1.0),
                    ("garch", 1.0),
                ],
            ),
            TagSpec::new(
                "return-predictability",
                &[
                    ("predict", 1.0),
                    ("predictability", 1.0),
                    ("predictive", 1.0),
                    ("forecast", 1.0),
                    ("future", 0.5),
                ],
            ),
            TagSpec::new(
                "risk-return-tradeoff",
                &[
                    ("risk", 1.0),
                    ("tradeoff", 1.0),
                    ("trade", 0.5),
                    ("off", 0.5),
                ],
            ),
            TagSpec::new(
                "valuation",
                &[
                    ("valuation", 1.0),
                    ("earnings", 1.0),
                    ("price", 0.5),
                    ("pricing", 0.5),
                ],
            ),
        ];
        let method = vec![
            TagSpec::new(
                "empirical",
                &[
                    ("data", 1.0),
                    ("sample", 1.0),
                    ("regression", 1.0),
                    ("backtest", 1.0),
                    ("evidence", 1.0),
                ],
            ),
            TagSpec::new(
                "theoretical",
                &[
                    ("model", 1.0),
                    ("assumption", 1.0),
                    ("assumptions", 1.0),
                    ("derivation", 1.0),
                    ("equilibrium", 1.0),
                ],
            ),
            TagSpec::new(
                "machine-learning",
                &[
                    ("lasso", 1.0),
                    ("neural", 1.0),
                    ("learning", 1.0),
                    ("training", 1.0),
                ],
            ),
            TagSpec::new(
                "replication",
                &[
                    ("replication", 1.0),
                    ("replicate", 1.0),
                    ("robustness", 1.0),
                ],
            ),
        ];
        let application = vec![
            TagSpec::new(
                "equities",
                &[
                    ("stock", 1.0),
                    ("stocks", 1.0),
                    ("equity", 1.0),
                    ("shares", 1.0),
                ],
            ),
            TagSpec::new("china-a-share", &[("china", 1.0), ("chinese", 1.0)]),
            TagSpec::new(
                "us-market",
                &[("nyse", 1.0), ("nasdaq", 1.0), ("crsp", 1.0), ("us", 0.5)],
            ),
            TagSpec::new(
                "options-markets",
                &[
                    ("option", 1.0),
                    ("options", 1.0),
                    ("put", 1.0),
                    ("call", 1.0),
                ],
            ),
        ];
        Taxonomy {
            facets: BTreeMap::from([
                (Facet::PrimaryArea, primary),
                (Facet::SecondaryTopic, secondary),
                (Facet::MethodOrientation, method),
                (Facet::ApplicationDomain, application),
            ]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggingRequest {
    pub content: String,
    pub facets: BTreeMap<Facet, Vec<TagSpec>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggingResponse {
    pub scores: BTreeMap<Facet, BTreeMap<String, f64>>,
}

/// Weighted keyword occurrences in `content`. Multi-word keywords match
/// consecutive tokens.
pub fn keyword_mass(content_tokens: &[String], keywords: &BTreeMap<String, f64>) -> f64 {
    keywords
        .iter()
        .map(|(kw, w)| {
            let pattern: Vec<String> = tokens(kw).collect();
            if pattern.is_empty() || pattern.len() > content_tokens.len() {
                return 0.0;
            }
            let hits = content_tokens
                .windows(pattern.len())
                .filter(|win| *win == pattern.as_slice())
                .count();
            hits as f64 * w
        })
        .sum()
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// The offline scoring function: a tag's share of its facet's total keyword
/// mass, rounded to 12 decimal places.
pub fn keyword_scores(
    content: &str,
    facets: &BTreeMap<Facet, Vec<TagSpec>>,
) -> BTreeMap<Facet, BTreeMap<String, f64>> {
    let toks: Vec<String> = tokens(content).collect();
    facets
        .iter()
        .map(|(facet, specs)| {
            let masses: Vec<(String, f64)> = specs
                .iter()
                .map(|s| (s.tag.clone(), keyword_mass(&toks, &s.effective_keywords())))
                .collect();
            let total: f64 = masses.iter().map(|(_, m)| m).sum();
            let scores = masses
                .into_iter()
                .map(|(t, m)| (t, if total > 0.0 { round12(m / total) } else { 0.0 }))
                .collect();
            (*facet, scores)
        })
        .collect()
}

const TAGGING_INSTRUCTION: &str = "You are a tagging model for quantitative finance research. \
For every candidate tag in the input JSON, score how strongly the content belongs to it on a scale \
from 0 to 1. Reply with JSON only, shaped as {\"scores\": {\"<facet>\": {\"<tag>\": <score>}}}.";

fn parse_tagging_reply(reply: &str) -> Result<TaggingResponse> {
    let body = match (reply.find('{'), reply.rfind('}')) {
        (Some(s), Some(e)) if s < e => &reply[s..=e],
        _ => reply,
    };
    serde_json::from_str(body).map_err(|e| Error::Upstream {
        role: ModelRole::Tagging.to_string(),
        message: format!("unparseable tagging reply: {e}"),
        segment_id: None,
    })
}

fn clamp_confidence(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Orders by facet, then descending confidence, then tag name.
pub fn sort_assignments(assignments: &mut [TagAssignment]) {
    assignments.sort_by(|a, b| {
        a.facet
            .cmp(&b.facet)
            .then(b.confidence.total_cmp(&a.confidence))
            .then_with(|| a.tag.cmp(&b.tag))
    });
}

pub fn tag(
    content: &str,
    taxonomy: &Taxonomy,
    gateway: &Gateway,
    threshold: f64,
) -> Result<Vec<TagAssignment>> {
    if content.trim().is_empty() {
        return Err(Error::invalid("cannot tag empty content"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    taxonomy.validate()?;

    let request = TaggingRequest {
        content: content.to_owned(),
        facets: taxonomy.facets.clone(),
    };
    let reply = gateway.complete(
        ModelRole::Tagging,
        &prompt::wrap(TAGGING_INSTRUCTION, &serde_json::to_string(&request)?),
    )?;
    let response = parse_tagging_reply(&reply)?;

    let mut out = Vec::new();
    for facet in Facet::ALL {
        let scores = response.scores.get(&facet);
        let mut scored: Vec<TagAssignment> = taxonomy
            .tags(facet)
            .iter()
            .map(|spec| TagAssignment {
                facet,
                tag: spec.tag.clone(),
                confidence: clamp_confidence(
                    scores
                        .and_then(|s| s.get(&spec.tag))
                        .copied()
                        .unwrap_or(0.0),
                ),
            })
            .collect();
        sort_assignments(&mut scored);
        if facet == Facet::PrimaryArea {
            out.extend(scored.into_iter().take(1));
        } else {
            out.extend(
                scored
                    .into_iter()
                    .filter(|a| a.confidence > 0.0 && a.confidence >= threshold),
            );
        }
    }
    Ok(out)
}

/// Keeps assignments with confidence ≥ `threshold`, preserving order. The
/// primary-area assignment is always kept.
pub fn filter_by_confidence(
    assignments: &[TagAssignment],
    threshold: f64,
) -> Result<Vec<TagAssignment>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(assignments
        .iter()
        .filter(|a| a.facet == Facet::PrimaryArea || a.confidence >= threshold)
        .cloned()
        .collect())
}
