//! Two-tier summarization with cost accounting.
//!
//! Content is packed into segments in reading order; each segment goes to the
//! cheap role, and the ordered concatenation of the local summaries goes once
//! to the powerful role.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_model::{ElementId, ParsedDocument};
use crate::model_gateway::{prompt, Gateway, InvocationRecord, ModelRole};
use crate::text::estimate_tokens;

pub const DEFAULT_SEGMENT_BUDGET: usize = 800;
pub const DEFAULT_SEPARATOR: &str = "\n---\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based position in document order.
    pub segment_id: usize,
    pub element_ids: Vec<ElementId>,
    pub text: String,
    pub token_estimate: usize,
    /// Set when a single element alone exceeds the budget.
    pub oversized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub role: ModelRole,
    pub invocation_count: usize,
    pub unit_cost: f64,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
    pub grand_total: f64,
}

impl CostLedger {
    pub fn from_counts(counts: &[(ModelRole, usize, f64)]) -> Self {
        let entries: Vec<CostEntry> = counts
            .iter()
            .map(|&(role, invocation_count, unit_cost)| CostEntry {
                role,
                invocation_count,
                unit_cost,
                total_cost: invocation_count as f64 * unit_cost,
            })
            .collect();
        let grand_total = entries.iter().map(|e| e.total_cost).sum();
        Self {
            entries,
            grand_total,
        }
    }

    /// Rebuilds a ledger from gateway records, one entry per role seen.
    pub fn from_records(records: &[InvocationRecord]) -> Self {
        let mut by_role: BTreeMap<ModelRole, (usize, f64, f64)> = BTreeMap::new();
        for r in records {
            let e = by_role.entry(r.role).or_insert((0, r.cost_units, 0.0));
            e.0 += 1;
            e.2 += r.cost_units;
        }
        let entries: Vec<CostEntry> = by_role
            .into_iter()
            .map(|(role, (count, unit, total))| CostEntry {
                role,
                invocation_count: count,
                unit_cost: unit,
                total_cost: total,
            })
            .collect();
        let grand_total = entries.iter().map(|e| e.total_cost).sum();
        Self {
            entries,
            grand_total,
        }
    }

    pub fn entry(&self, role: ModelRole) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.role == role)
    }

    pub fn invocations(&self, role: ModelRole) -> usize {
        self.entry(role).map_or(0, |e| e.invocation_count)
    }

    /// Folds another ledger into this one, summing counts per role.
    pub fn absorb(&mut self, other: &CostLedger) {
        for e in &other.entries {
            match self.entries.iter_mut().find(|x| x.role == e.role) {
                Some(x) => {
                    x.invocation_count += e.invocation_count;
                    x.total_cost = x.invocation_count as f64 * x.unit_cost;
                }
                None => self.entries.push(e.clone()),
            }
        }
        self.grand_total = self.entries.iter().map(|e| e.total_cost).sum();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBundle {
    pub local_summaries: Vec<(usize, String)>,
    pub final_summary: String,
    pub ledger: CostLedger,
}

/// Greedy packing in reading order. A new segment starts whenever the owning
/// structure node changes or the next element would overflow the budget.
/// Elements are never split; one that alone exceeds the budget becomes its
/// own oversized segment.
pub fn segment(parsed: &ParsedDocument, budget: usize) -> Result<Vec<Segment>> {
    if budget < 1 {
        return Err(Error::invalid("segment budget must be at least 1 token"));
    }
    let owner: HashMap<&ElementId, usize> = parsed
        .structure
        .nodes
        .iter()
        .enumerate()
        .flat_map(|(i, n)| n.element_ids.iter().map(move |e| (e, i)))
        .collect();

    struct Open<'a> {
        node: usize,
        ids: Vec<ElementId>,
        parts: Vec<&'a str>,
        tokens: usize,
    }

    let mut out = Vec::new();
    let close = |open: Open<'_>, out: &mut Vec<Segment>| {
        out.push(Segment {
            segment_id: out.len() + 1,
            element_ids: open.ids,
            text: open.parts.join("\n\n"),
            token_estimate: open.tokens,
            oversized: open.tokens > budget,
        });
    };

    let mut current: Option<Open<'_>> = None;
    for el in &parsed.elements {
        let node = owner.get(&el.element_id).copied().unwrap_or(0);
        let tokens = estimate_tokens(&el.content);
        if let Some(open) = current.take() {
            if open.node != node || open.tokens + tokens > budget {
                close(open, &mut out);
            } else {
                current = Some(open);
            }
        }
        let open = current.get_or_insert_with(|| Open {
            node,
            ids: Vec::new(),
            parts: Vec::new(),
            tokens: 0,
        });
        open.ids.push(el.element_id.clone());
        open.parts.push(&el.content);
        open.tokens += tokens;
        if tokens > budget {
            close(current.take().unwrap(), &mut out);
        }
    }
    if let Some(open) = current {
        close(open, &mut out);
    }
    Ok(out)
}

const LOCAL_INSTRUCTION: &str = "Summarize the following section of a quantitative finance \
document in at most two sentences. Keep definitions, data sources and reported numbers.";

const AGGREGATE_INSTRUCTION: &str = "The input is an ordered list of section summaries from one \
document, separated by divider lines. Write a single coherent summary of the whole document.";

pub fn summarize(
    parsed: &ParsedDocument,
    gateway: &Gateway,
    budget: usize,
    separator: &str,
) -> Result<SummaryBundle> {
    let segments = segment(parsed, budget)?;
    let unit = |role: ModelRole| {
        gateway
            .unit_cost(role)
            .ok_or_else(|| Error::config(format!("gateway.roles.{role}"), "role is not configured"))
    };
    let (cheap_cost, powerful_cost) = (unit(ModelRole::Cheap)?, unit(ModelRole::Powerful)?);

    if segments.is_empty() {
        return Ok(SummaryBundle {
            local_summaries: Vec::new(),
            final_summary: String::new(),
            ledger: CostLedger::from_counts(&[
                (ModelRole::Cheap, 0, cheap_cost),
                (ModelRole::Powerful, 0, powerful_cost),
            ]),
        });
    }

    let results: Vec<Result<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = segments
            .iter()
            .map(|seg| {
                s.spawn(move || {
                    gateway.complete(
                        ModelRole::Cheap,
                        &prompt::wrap(LOCAL_INSTRUCTION, &seg.text),
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("summarizer worker panicked"))
            .collect()
    });

    let mut local_summaries = Vec::with_capacity(segments.len());
    for (seg, result) in segments.iter().zip(results) {
        match result {
            Ok(text) => local_summaries.push((seg.segment_id, text)),
            Err(Error::Upstream { role, message, .. }) => {
                return Err(Error::Upstream {
                    role,
                    message,
                    segment_id: Some(seg.segment_id),
                })
            }
            Err(e) => return Err(e),
        }
    }

    let joined = local_summaries
        .iter()
        .map(|(_, s)| s.as_str())
        .collect::<Vec<_>>()
        .join(separator);
    let final_summary = gateway.complete(
        ModelRole::Powerful,
        &prompt::wrap(AGGREGATE_INSTRUCTION, &joined),
    )?;

    Ok(SummaryBundle {
        local_summaries,
        final_summary,
        ledger: CostLedger::from_counts(&[
            (ModelRole::Cheap, segments.len(), cheap_cost),
            (ModelRole::Powerful, 1, powerful_cost),
        ]),
    })
}
