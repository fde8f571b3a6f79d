use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Location, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemEvent {
    pub time_s: f64,
    pub delta_bytes: i64,
    pub tag: String,
    pub occupancy_bytes: u64,
}

/// Allocation history of one device or host.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTimeline {
    pub location: Location,
    pub capacity: u64,
    current: u64,
    peak: u64,
    allocs: BTreeMap<String, u64>,
    persistent: BTreeSet<String>,
    pub events: Vec<MemEvent>,
}

impl MemoryTimeline {
    pub fn new(location: Location, capacity: u64) -> Self {
        MemoryTimeline {
            location,
            capacity,
            current: 0,
            peak: 0,
            allocs: BTreeMap::new(),
            persistent: BTreeSet::new(),
            events: Vec::new(),
        }
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn tag_bytes(&self, tag: &str) -> u64 {
        self.allocs.get(tag).copied().unwrap_or(0)
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, u64)> {
        self.allocs.iter().map(|(t, b)| (t.as_str(), *b))
    }

    fn push(&mut self, time_s: f64, delta: i64, tag: &str) {
        self.events.push(MemEvent {
            time_s,
            delta_bytes: delta,
            tag: tag.to_string(),
            occupancy_bytes: self.current,
        });
    }

    pub(crate) fn alloc(&mut self, now: f64, size: u64, tag: &str) -> Result<(), SimError> {
        if size == 0 {
            return Ok(());
        }
        let next = self.current.checked_add(size).filter(|n| *n <= self.capacity);
        let Some(next) = next else {
            return Err(SimError::OutOfMemory {
                location: self.location,
                tag: tag.to_string(),
                requested: size,
                occupancy: self.current,
                capacity: self.capacity,
            });
        };
        self.current = next;
        self.peak = self.peak.max(next);
        *self.allocs.entry(tag.to_string()).or_default() += size;
        self.persistent.remove(tag);
        self.push(now, size as i64, tag);
        Ok(())
    }

    /// Frees `bytes` of `tag`; the tag disappears once it reaches zero.
    pub(crate) fn release(&mut self, now: f64, tag: &str, bytes: u64) -> Result<(), SimError> {
        let held = self.allocs.get(tag).copied();
        match held {
            Some(h) if h >= bytes => {
                if bytes == 0 {
                    return Ok(());
                }
                self.current -= bytes;
                if h == bytes {
                    self.allocs.remove(tag);
                    self.persistent.remove(tag);
                } else {
                    self.allocs.insert(tag.to_string(), h - bytes);
                }
                self.push(now, -(bytes as i64), tag);
                Ok(())
            }
            _ => Err(SimError::UnknownTag { location: self.location, tag: tag.to_string() }),
        }
    }

    pub(crate) fn free(&mut self, now: f64, tag: &str) -> Result<u64, SimError> {
        let held = self
            .allocs
            .get(tag)
            .copied()
            .ok_or_else(|| SimError::UnknownTag { location: self.location, tag: tag.to_string() })?;
        self.release(now, tag, held)?;
        Ok(held)
    }

    pub(crate) fn mark_persistent(&mut self, tag: &str) -> Result<(), SimError> {
        if !self.allocs.contains_key(tag) {
            return Err(SimError::UnknownTag { location: self.location, tag: tag.to_string() });
        }
        self.persistent.insert(tag.to_string());
        Ok(())
    }

    /// Tags still allocated and not marked persistent.
    pub fn leaked(&self) -> Vec<String> {
        self.allocs.keys().filter(|t| !self.persistent.contains(*t)).cloned().collect()
    }

    /// Highest occupancy from event `from` onwards, including the level held
    /// just before it.
    pub fn window_peak(&self, from: usize) -> u64 {
        let before = if from == 0 { 0 } else { self.events.get(from - 1).map_or(self.current, |e| e.occupancy_bytes) };
        self.events.iter().skip(from).map(|e| e.occupancy_bytes).fold(before, u64::max)
    }
}
