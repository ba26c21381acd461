//! Shared agent memory: topology summaries, a demand digest, a bounded
//! outcome history and the orchestrator's guidance board.
//!
//! The store is a single logical object owned by the engine. Eventual
//! consistency is modelled as a fixed read lag: a reader at slot `t` sees
//! the state as of slot `t - staleness`. Node failures never touch it.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ActionClass, ContextKey};
use crate::orchestrator::PolicyGuidance;
use crate::topology::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("guidance publish slot {got} does not follow {last}")]
    NonMonotonicGuidance { last: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Outcome history capacity in episodes.
    pub capacity: usize,
    /// Read lag in slots.
    pub staleness: u64,
    /// Demand digest window in slots.
    pub digest_window: usize,
    /// Estimates pool records from every agent instead of only the reader's.
    pub pooled: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 60,
            staleness: 2,
            digest_window: 200,
            pooled: true,
        }
    }
}

/// One agent-action-outcome observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub agent: NodeId,
    pub context: ContextKey,
    pub action: ActionClass,
    pub delta: f64,
    /// Part of `delta` the agent modeled from its own view before acting.
    #[serde(default)]
    pub predicted: f64,
    pub slot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub alive: Vec<NodeId>,
    pub degrees: Vec<(NodeId, usize)>,
    pub updated: u64,
}

/// Per-slot aggregate arrivals plus system-level metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub slot: u64,
    pub arrivals: Vec<u32>,
    pub latency: f64,
    pub cost: f64,
    pub risk: f64,
    pub overloaded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandDigest {
    pub window: usize,
    pub entries: VecDeque<DigestEntry>,
}

impl DemandDigest {
    fn push(&mut self, entry: DigestEntry) {
        self.entries.push_back(entry);
        while self.entries.len() > self.window {
            self.entries.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeHistory {
    pub capacity: usize,
    pub records: VecDeque<EpisodeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Estimate {
    Unseen,
    Seen { mean: f64, count: usize },
}

impl Estimate {
    pub fn count(&self) -> usize {
        match self {
            Estimate::Unseen => 0,
            Estimate::Seen { count, .. } => *count,
        }
    }

    pub fn from_samples(sum: f64, count: usize) -> Self {
        if count == 0 {
            Estimate::Unseen
        } else {
            Estimate::Seen {
                mean: sum / count as f64,
                count,
            }
        }
    }
}

const VERSIONS_KEPT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedMemory {
    pub config: MemoryConfig,
    topology: VecDeque<TopologySummary>,
    demand: DemandDigest,
    history: OutcomeHistory,
    guidance: VecDeque<PolicyGuidance>,
    writes: u64,
}

impl SharedMemory {
    pub fn new(config: MemoryConfig) -> Self {
        Self {
            topology: VecDeque::new(),
            demand: DemandDigest {
                window: config.digest_window,
                entries: VecDeque::new(),
            },
            history: OutcomeHistory {
                capacity: config.capacity,
                records: VecDeque::new(),
            },
            guidance: VecDeque::new(),
            writes: 0,
            config,
        }
    }

    /// Appends an outcome; evicts the oldest when full.
    pub fn append_episode(&mut self, record: EpisodeRecord) {
        self.writes += 1;
        if self.history.capacity == 0 {
            return;
        }
        if self.history.records.len() == self.history.capacity {
            self.history.records.pop_front();
        }
        self.history.records.push_back(record);
    }

    pub fn publish_topology(&mut self, summary: TopologySummary) {
        self.topology.push_back(summary);
        while self.topology.len() > VERSIONS_KEPT {
            self.topology.pop_front();
        }
    }

    pub fn record_digest(&mut self, entry: DigestEntry) {
        self.demand.push(entry);
    }

    pub fn publish_guidance(&mut self, guidance: PolicyGuidance) -> Result<(), MemoryError> {
        if let Some(last) = self.guidance.back() {
            if guidance.publish_slot <= last.publish_slot {
                return Err(MemoryError::NonMonotonicGuidance {
                    last: last.publish_slot,
                    got: guidance.publish_slot,
                });
            }
        }
        self.guidance.push_back(guidance);
        while self.guidance.len() > VERSIONS_KEPT {
            self.guidance.pop_front();
        }
        Ok(())
    }

    /// Episode writes so far, including evicted ones.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.history.records.iter()
    }

    pub fn len(&self) -> usize {
        self.history.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.records.is_empty()
    }

    pub fn digest(&self) -> &DemandDigest {
        &self.demand
    }

    pub fn latest_guidance(&self) -> Option<&PolicyGuidance> {
        self.guidance.back()
    }

    /// Staleness-bounded view for a reader at slot `t`.
    pub fn read(&self, _reader: NodeId, t: u64) -> SharedView<'_> {
        SharedView {
            mem: self,
            cutoff: t.saturating_sub(self.config.staleness),
        }
    }

    /// Current state with no lag.
    pub fn current(&self) -> SharedView<'_> {
        SharedView {
            mem: self,
            cutoff: u64::MAX,
        }
    }

    /// Mean delta for `(agent, context, action)` over the current window.
    pub fn query_estimate(
        &self,
        agent: Option<NodeId>,
        context: ContextKey,
        action: ActionClass,
    ) -> Estimate {
        self.current().query_estimate(agent, context, action)
    }

    /// One JSON object per episode, oldest first.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in self.episodes() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SharedView<'a> {
    mem: &'a SharedMemory,
    cutoff: u64,
}

impl<'a> SharedView<'a> {
    pub fn cutoff(&self) -> u64 {
        self.cutoff
    }

    pub fn episodes(&self) -> impl Iterator<Item = &'a EpisodeRecord> + 'a {
        let cutoff = self.cutoff;
        self.mem
            .history
            .records
            .iter()
            .filter(move |r| r.slot <= cutoff)
    }

    pub fn digest(&self) -> impl Iterator<Item = &'a DigestEntry> + 'a {
        let cutoff = self.cutoff;
        self.mem
            .demand
            .entries
            .iter()
            .filter(move |e| e.slot <= cutoff)
    }

    pub fn topology(&self) -> Option<&'a TopologySummary> {
        self.mem
            .topology
            .iter()
            .rev()
            .find(|t| t.updated <= self.cutoff)
    }

    pub fn guidance(&self) -> Option<&'a PolicyGuidance> {
        self.mem
            .guidance
            .iter()
            .rev()
            .find(|g| g.publish_slot <= self.cutoff)
    }

    pub fn query_estimate(
        &self,
        agent: Option<NodeId>,
        context: ContextKey,
        action: ActionClass,
    ) -> Estimate {
        self.fold(agent, context, action, |r| r.delta)
    }

    /// Mean of `delta - predicted`: what the agents' own models missed.
    pub fn query_residual(
        &self,
        agent: Option<NodeId>,
        context: ContextKey,
        action: ActionClass,
    ) -> Estimate {
        self.fold(agent, context, action, |r| r.delta - r.predicted)
    }

    fn fold(
        &self,
        agent: Option<NodeId>,
        context: ContextKey,
        action: ActionClass,
        value: impl Fn(&EpisodeRecord) -> f64,
    ) -> Estimate {
        let (sum, count) = self
            .episodes()
            .filter(|r| {
                agent.is_none_or(|a| a == r.agent) && r.context == context && r.action == action
            })
            .fold((0.0, 0usize), |(s, n), r| (s + value(r), n + 1));
        Estimate::from_samples(sum, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{Level, Tier};

    fn ctx() -> ContextKey {
        ContextKey {
            demand: Level::Med,
            utilization: Level::Low,
        }
    }

    fn add() -> ActionClass {
        ActionClass::Add {
            tier: Tier::Top,
            neighbor_has: false,
        }
    }

    fn rec(agent: NodeId, delta: f64, slot: u64) -> EpisodeRecord {
        EpisodeRecord {
            agent,
            context: ctx(),
            action: add(),
            delta,
            predicted: 0.0,
            slot,
        }
    }

    fn mem(capacity: usize, staleness: u64) -> SharedMemory {
        SharedMemory::new(MemoryConfig {
            capacity,
            staleness,
            ..MemoryConfig::default()
        })
    }

    #[test]
    fn append_to_empty() {
        let mut m = mem(100, 0);
        m.append_episode(rec(0, 1.0, 0));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut m = mem(100, 0);
        for i in 0..101 {
            m.append_episode(rec(0, i as f64, i));
        }
        assert_eq!(m.len(), 100);
        assert_eq!(m.episodes().next().unwrap().slot, 1);
        assert_eq!(m.writes(), 101);
    }

    #[test]
    fn zero_staleness_sees_everything() {
        let mut m = mem(10, 0);
        m.append_episode(rec(0, 1.0, 7));
        assert_eq!(m.read(1, 7).episodes().count(), 1);
    }

    #[test]
    fn staleness_lag_rule() {
        let mut m = mem(10, 5);
        m.append_episode(rec(0, 1.0, 10));
        assert_eq!(m.read(1, 12).episodes().count(), 0);
        assert_eq!(m.read(1, 15).episodes().count(), 1);
    }

    #[test]
    fn estimates() {
        let mut m = mem(10, 0);
        assert_eq!(m.query_estimate(Some(0), ctx(), add()), Estimate::Unseen);
        m.append_episode(rec(0, 2.0, 0));
        m.append_episode(rec(0, 4.0, 1));
        m.append_episode(rec(1, 100.0, 1));
        assert_eq!(
            m.query_estimate(Some(0), ctx(), add()),
            Estimate::Seen {
                mean: 3.0,
                count: 2
            }
        );
        assert_eq!(m.query_estimate(None, ctx(), add()).count(), 3);
    }

    #[test]
    fn eviction_changes_estimate() {
        let mut m = mem(3, 0);
        for (i, d) in [10.0, 1.0, 2.0, 3.0].into_iter().enumerate() {
            m.append_episode(rec(0, d, i as u64));
        }
        // 10.0 evicted: mean of 1, 2, 3
        assert_eq!(
            m.query_estimate(Some(0), ctx(), add()),
            Estimate::Seen {
                mean: 2.0,
                count: 3
            }
        );
    }

    #[test]
    fn reads_are_reproducible() {
        let mut m = mem(10, 2);
        for i in 0..6 {
            m.append_episode(rec(i % 2, i as f64, i as u64));
        }
        let a: Vec<_> = m.read(0, 5).episodes().copied().collect();
        let b: Vec<_> = m.read(0, 5).episodes().copied().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_export_one_line_per_record() {
        let mut m = mem(10, 0);
        m.append_episode(rec(0, 1.5, 0));
        m.append_episode(rec(2, -0.5, 3));
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: EpisodeRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, rec(2, -0.5, 3));
    }

    #[test]
    fn guidance_slots_must_increase() {
        let mut m = mem(10, 0);
        let g = PolicyGuidance::neutral(
            &crate::objective::ObjectiveWeights::new(1.0, 1.0, 1.0),
            0.1,
            5,
        );
        m.publish_guidance(g.clone()).unwrap();
        assert!(m.publish_guidance(g).is_err());
    }
}
