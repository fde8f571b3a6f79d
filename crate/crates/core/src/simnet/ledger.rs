use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LinkId, Location, Tag};

/// Completed transfer, as recorded when its last byte is delivered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub id: u64,
    pub tag: Tag,
    pub src: Location,
    pub dst: Location,
    pub bytes: u64,
    pub submitted_s: f64,
    pub completed_s: f64,
}

/// Cumulative bytes per link and per tag. Only ever grows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub per_link: BTreeMap<LinkId, u64>,
    pub per_tag: BTreeMap<Tag, u64>,
    #[serde(skip)]
    pub log: Vec<TransferRecord>,
}

impl CommLedger {
    pub(crate) fn credit(&mut self, route: &[LinkId], rec: TransferRecord) {
        for link in route {
            *self.per_link.entry(*link).or_default() += rec.bytes;
        }
        *self.per_tag.entry(rec.tag).or_default() += rec.bytes;
        self.log.push(rec);
    }

    pub fn tag_bytes(&self, tag: Tag) -> u64 {
        self.per_tag.get(&tag).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.per_tag.values().sum()
    }

    pub fn max_link_bytes(&self) -> u64 {
        self.per_link.values().copied().max().unwrap_or(0)
    }

    /// Per-tag totals keyed by the tag's wire name.
    pub fn tag_map(&self) -> BTreeMap<String, u64> {
        self.per_tag.iter().map(|(t, b)| (t.name().to_string(), *b)).collect()
    }

    /// Total time during which at least one transfer with one of `tags` was
    /// in flight (union of [submitted, completed] intervals).
    pub fn busy_time(&self, tags: &[Tag]) -> f64 {
        let mut spans: Vec<(f64, f64)> = self
            .log
            .iter()
            .filter(|r| tags.contains(&r.tag))
            .map(|r| (r.submitted_s, r.completed_s))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut total = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (s, e) in spans {
            match cur {
                Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    total += ce - cs;
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some((cs, ce)) = cur {
            total += ce - cs;
        }
        total
    }
}
