//! Slow-timescale orchestrator: ranks the latency/cost/risk sub-objectives
//! from long-term statistics and publishes bounded weight guidance. It never
//! issues control actions.

use serde::{Deserialize, Serialize};

use crate::objective::{decompose, Component, ObjectiveWeights};
use crate::shared_memory::DigestEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub enabled: bool,
    /// Slots between publications.
    pub period: u64,
    /// Relative half-width of the weight bounds.
    pub bound_width: f64,
    /// Weighted share above which a component counts as dominant.
    pub dominance: f64,
    /// Fraction of digest slots with an overloaded node that counts as sustained overload.
    pub overload_fraction: f64,
    /// Optional soft per-node utilization ceiling passed to agents.
    pub utilization_ceiling: Option<f64>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            period: 100,
            bound_width: 0.1,
            dominance: 0.6,
            overload_fraction: 0.5,
            utilization_ceiling: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBound {
    pub component: Component,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGuidance {
    pub bounds: Vec<WeightBound>,
    /// Active sub-objectives, highest priority first.
    pub ranking: Vec<Component>,
    /// Weights agents use in place of the configured ones.
    pub effective: ObjectiveWeights<f64>,
    pub utilization_ceiling: Option<f64>,
    pub publish_slot: u64,
}

impl PolicyGuidance {
    /// Ranking by configured magnitude, no dominance signal.
    pub fn neutral(weights: &ObjectiveWeights<f64>, bound_width: f64, slot: u64) -> Self {
        build(weights, bound_width, None, None, slot)
    }

    pub fn bound(&self, component: Component) -> Option<&WeightBound> {
        self.bounds.iter().find(|b| b.component == component)
    }

    pub fn within_bounds(&self) -> bool {
        self.bounds.iter().all(|b| {
            let w = self.effective.weight(b.component);
            b.lower >= 0.0 && b.lower <= b.upper && w >= b.lower - 1e-12 && w <= b.upper + 1e-12
        })
    }
}

/// Long-term aggregates read from the demand digest.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LongTermStats {
    pub latency: f64,
    pub cost: f64,
    pub risk: f64,
    /// Fraction of slots with at least one node above the overload threshold.
    pub overload_share: f64,
    pub mean_arrivals: f64,
    pub slots: usize,
}

impl LongTermStats {
    pub fn from_digest<'a>(entries: impl IntoIterator<Item = &'a DigestEntry>) -> Self {
        let mut s = Self::default();
        let mut overloaded = 0usize;
        for e in entries {
            s.slots += 1;
            s.latency += e.latency;
            s.cost += e.cost;
            s.risk += e.risk;
            s.mean_arrivals += e.arrivals.iter().map(|&a| a as f64).sum::<f64>();
            if e.overloaded > 0 {
                overloaded += 1;
            }
        }
        if s.slots > 0 {
            let n = s.slots as f64;
            s.latency /= n;
            s.cost /= n;
            s.risk /= n;
            s.mean_arrivals /= n;
            s.overload_share = overloaded as f64 / n;
        }
        s
    }

    fn component(&self, c: Component) -> f64 {
        match c {
            Component::Latency => self.latency,
            Component::Cost => self.cost,
            Component::Risk => self.risk,
        }
    }
}

fn build(
    weights: &ObjectiveWeights<f64>,
    bound_width: f64,
    promoted: Option<Component>,
    ceiling: Option<f64>,
    slot: u64,
) -> PolicyGuidance {
    let subs = decompose(weights);
    let mut ranking: Vec<Component> = subs.iter().map(|s| s.component).collect();
    // stable sort keeps latency/cost/risk order among equal weights
    ranking.sort_by(|a, b| weights.weight(*b).total_cmp(&weights.weight(*a)));
    if let Some(p) = promoted {
        if let Some(pos) = ranking.iter().position(|&c| c == p) {
            let c = ranking.remove(pos);
            ranking.insert(0, c);
        }
    }
    let bounds: Vec<WeightBound> = Component::ALL
        .into_iter()
        .map(|component| {
            let w = weights.weight(component);
            WeightBound {
                component,
                lower: w * (1.0 - bound_width),
                upper: w * (1.0 + bound_width),
            }
        })
        .collect();
    let mut effective = *weights;
    if let Some(&top) = ranking.first() {
        let upper = bounds
            .iter()
            .find(|b| b.component == top)
            .map_or(0.0, |b| b.upper);
        match top {
            Component::Latency => effective.alpha = upper,
            Component::Cost => effective.beta = upper,
            Component::Risk => effective.gamma = upper,
        }
    }
    PolicyGuidance {
        bounds,
        ranking,
        effective,
        utilization_ceiling: ceiling,
        publish_slot: slot,
    }
}

/// Derives guidance from long-term statistics.
///
/// Sustained overload promotes risk; otherwise a component whose weighted
/// share reaches `dominance` is promoted. The top-ranked component's
/// effective weight is set to its upper bound.
pub fn orchestrate(
    stats: &LongTermStats,
    weights: &ObjectiveWeights<f64>,
    config: &OrchestratorConfig,
    slot: u64,
) -> PolicyGuidance {
    let active: Vec<Component> = decompose(weights).iter().map(|s| s.component).collect();
    let promoted = if stats.slots > 0
        && stats.overload_share >= config.overload_fraction
        && active.contains(&Component::Risk)
    {
        Some(Component::Risk)
    } else {
        let shares: Vec<(Component, f64)> = active
            .iter()
            .map(|&c| (c, weights.weight(c) * stats.component(c)))
            .collect();
        let total: f64 = shares.iter().map(|s| s.1).sum();
        if total > 0.0 {
            shares
                .iter()
                .find(|s| s.1 / total >= config.dominance)
                .map(|s| s.0)
        } else {
            None
        }
    };
    build(
        weights,
        config.bound_width,
        promoted,
        config.utilization_ceiling,
        slot,
    )
}
