//! Peer-to-peer coordination rounds: one-hop summary exchange, conflict
//! detection and pairwise negotiation on the exact joint change of the
//! potential.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::move_neighborhood;
use crate::objective::{Forward, JointAction, NodeAction, ObjectiveParams, RouteTable};
use crate::scalar::Scalar;
use crate::topology::{FogGraph, NodeId};
use crate::workload::{ContentId, DemandMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinationConfig {
    pub enabled: bool,
    /// Slots between rounds.
    pub interval: u64,
    /// An overloaded neighbor is only offloaded to nodes below `rho_max - margin`.
    pub overload_margin: f64,
    /// Moves of the first party paired with the second's, best unilateral first (`None` for all).
    pub shortlist: Option<usize>,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 10,
            overload_margin: 0.1,
            shortlist: Some(4),
        }
    }
}

/// What a node tells its neighbors in one exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub node: NodeId,
    pub utilization: f64,
    pub load: f64,
    pub capacity: f64,
    pub cache: BTreeSet<ContentId>,
    /// Local demand rate of each cached content.
    pub cached_demand: BTreeMap<ContentId, f64>,
    pub forward: Forward,
    pub slot: u64,
}

pub fn summarize<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    loads: &[S],
    demand: &DemandMatrix<S>,
    node: NodeId,
    slot: u64,
) -> StateSummary {
    let action = joint.get(node).cloned().unwrap_or_else(NodeAction::empty);
    let capacity = graph.node(node).compute_capacity.as_f64();
    let load = loads[node].as_f64();
    let cached_demand = action
        .cache
        .iter()
        .map(|&c| {
            (
                c,
                if c < demand.contents() {
                    demand.rate(node, c).as_f64()
                } else {
                    0.0
                },
            )
        })
        .collect();
    StateSummary {
        node,
        utilization: load / capacity,
        load,
        capacity,
        cache: action.cache,
        cached_demand,
        forward: action.forward,
        slot,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub summaries: Vec<StateSummary>,
    pub messages: u64,
}

/// Summaries received by `node` from its alive neighbors, two messages each.
pub fn exchange<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    loads: &[S],
    demand: &DemandMatrix<S>,
    node: NodeId,
    slot: u64,
) -> Exchange {
    let summaries: Vec<StateSummary> = graph
        .neighbors(node)
        .map(|(j, _)| summarize(graph, joint, loads, demand, j, slot))
        .collect();
    let messages = 2 * summaries.len() as u64;
    Exchange {
        summaries,
        messages,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConflictKind {
    Overload {
        overloaded: NodeId,
        utilization: f64,
        helper_utilization: f64,
    },
    RedundantReplication {
        content: ContentId,
        combined_demand: f64,
    },
    Contention {
        target: NodeId,
        target_utilization: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    /// Smaller id first.
    pub pair: (NodeId, NodeId),
    pub conflict: ConflictKind,
}

impl ConflictReport {
    fn new(a: NodeId, b: NodeId, conflict: ConflictKind) -> Self {
        Self {
            pair: (a.min(b), a.max(b)),
            conflict,
        }
    }
}

/// Conflicts between `own` and each neighbor summary. Contention needs the
/// shared target to be among the visible neighbors.
pub fn detect_conflicts(
    own: &StateSummary,
    neighbors: &[StateSummary],
    rho_max: f64,
    margin: f64,
) -> Vec<ConflictReport> {
    let mut out = Vec::new();
    for nb in neighbors.iter().filter(|s| s.node != own.node) {
        if nb.utilization > rho_max && own.utilization < rho_max - margin {
            out.push(ConflictReport::new(
                own.node,
                nb.node,
                ConflictKind::Overload {
                    overloaded: nb.node,
                    utilization: nb.utilization,
                    helper_utilization: own.utilization,
                },
            ));
        }
        for c in own.cache.intersection(&nb.cache) {
            let d_own = own.cached_demand.get(c).copied().unwrap_or(0.0);
            let d_nb = nb.cached_demand.get(c).copied().unwrap_or(0.0);
            let fits = |keeper: &StateSummary, extra: f64| {
                (keeper.load + extra) / keeper.capacity <= rho_max
            };
            if fits(own, d_nb) || fits(nb, d_own) {
                out.push(ConflictReport::new(
                    own.node,
                    nb.node,
                    ConflictKind::RedundantReplication {
                        content: *c,
                        combined_demand: d_own + d_nb,
                    },
                ));
            }
        }
        if let (Forward::Node(a), Forward::Node(b)) = (own.forward, nb.forward) {
            if a == b && a != own.node && a != nb.node {
                if let Some(t) = neighbors.iter().find(|s| s.node == a) {
                    if t.utilization > rho_max {
                        out.push(ConflictReport::new(
                            own.node,
                            nb.node,
                            ConflictKind::Contention {
                                target: a,
                                target_utilization: t.utilization,
                            },
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Moves of `node` that bear on `conflict`; the current action comes first.
fn relevant_moves<S: Scalar>(
    graph: &FogGraph<S>,
    node: NodeId,
    current: &NodeAction,
    contents: &[ContentId],
    conflict: &ConflictKind,
) -> Vec<NodeAction> {
    let all = move_neighborhood(graph, node, current, contents);
    let keep = all[0].clone();
    let mut out = vec![keep];
    out.extend(all.into_iter().skip(1).filter(|a| match conflict {
        ConflictKind::RedundantReplication { content, .. } => !a.cache.contains(content),
        ConflictKind::Overload { overloaded, .. } => {
            if *overloaded == node {
                a.cache.len() < current.cache.len() || a.forward != current.forward
            } else {
                a.cache.len() >= current.cache.len()
            }
        }
        ConflictKind::Contention { .. } => {
            a.forward != current.forward || a.cache.len() > current.cache.len()
        }
    }));
    out
}

/// Outcome of one negotiation: replacement actions, if any, and the joint delta.
#[derive(Debug, Clone, PartialEq)]
pub struct Agreement<S> {
    pub first: Option<NodeAction>,
    pub second: Option<NodeAction>,
    pub delta: S,
}

/// Exact change of the potential when `i` and `j` switch together,
/// accumulated as the two sequential unilateral deltas.
pub fn pair_delta<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    demand: &DemandMatrix<S>,
    params: &ObjectiveParams<S>,
    table: &RouteTable<S>,
    (i, ai): (NodeId, &NodeAction),
    (j, aj): (NodeId, &NodeAction),
) -> S {
    let d1 = table.deviation_delta(graph, joint, params, i, ai);
    let mid = joint.with(i, ai.clone());
    let mid_table = RouteTable::build(graph, &mid, demand);
    d1 + mid_table.deviation_delta(graph, &mid, params, j, aj)
}

/// Searches the restricted cross product of both neighborhoods for the
/// pair minimizing the joint delta; keeps both actions unless the best
/// improvement exceeds `epsilon_switch`. Ties keep the earliest pair. With
/// a `shortlist` only that many of the first party's moves, ranked by their
/// unilateral delta, are paired.
#[allow(clippy::too_many_arguments)]
pub fn negotiate<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    demand: &DemandMatrix<S>,
    params: &ObjectiveParams<S>,
    table: &RouteTable<S>,
    report: &ConflictReport,
    contents: (&[ContentId], &[ContentId]),
    epsilon_switch: S,
    shortlist: Option<usize>,
) -> Agreement<S> {
    let (i, j) = report.pair;
    let keep = Agreement {
        first: None,
        second: None,
        delta: S::zero(),
    };
    let (Some(cur_i), Some(cur_j)) = (joint.get(i), joint.get(j)) else {
        return keep;
    };
    let moves_i = relevant_moves(graph, i, cur_i, contents.0, &report.conflict);
    let moves_j = relevant_moves(graph, j, cur_j, contents.1, &report.conflict);
    let mut first: Vec<(usize, S)> = moves_i
        .iter()
        .enumerate()
        .map(|(x, ai)| {
            (
                x,
                if x == 0 {
                    S::zero()
                } else {
                    table.deviation_delta(graph, joint, params, i, ai)
                },
            )
        })
        .collect();
    if let Some(k) = shortlist {
        first[1..].sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        first.truncate(k + 1);
    }
    let mut best = (S::zero(), 0usize, 0usize);
    for (x, d1) in first {
        let ai = &moves_i[x];
        let (mid, mid_table);
        let (mid_ref, mid_table_ref) = if x == 0 {
            (joint, table)
        } else {
            mid = joint.with(i, ai.clone());
            mid_table = RouteTable::build(graph, &mid, demand);
            (&mid, &mid_table)
        };
        for (y, aj) in moves_j.iter().enumerate() {
            if x == 0 && y == 0 {
                continue;
            }
            let d = d1 + mid_table_ref.deviation_delta(graph, mid_ref, params, j, aj);
            if d < best.0 {
                best = (d, x, y);
            }
        }
    }
    if best.0 < -epsilon_switch {
        Agreement {
            first: (best.1 != 0).then(|| moves_i[best.1].clone()),
            second: (best.2 != 0).then(|| moves_j[best.2].clone()),
            delta: best.0,
        }
    } else {
        keep
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundOutcome {
    pub messages: u64,
    pub exchanges: u64,
    pub conflicts: Vec<ConflictReport>,
    pub changes: Vec<(NodeId, NodeAction)>,
    /// Sum of accepted joint deltas.
    pub delta: f64,
}

/// One coordination round over the whole graph. Every alive edge is one
/// exchange; conflicts are handled in (min id, max id) order and each node
/// changes at most once. Accepted changes are applied to `joint`.
#[allow(clippy::too_many_arguments)]
pub fn coordination_round<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &mut JointAction,
    demand: &DemandMatrix<S>,
    params: &ObjectiveParams<S>,
    config: &CoordinationConfig,
    contents: &[Vec<ContentId>],
    epsilon_switch: S,
    slot: u64,
) -> RoundOutcome {
    let mut out = RoundOutcome::default();
    let mut table = RouteTable::build(graph, joint, demand);
    let rho = params.rho_max.as_f64();
    let mut reports: Vec<ConflictReport> = Vec::new();
    for i in graph.alive_nodes() {
        let own = summarize(graph, joint, table.loads(), demand, i, slot);
        let ex = exchange(graph, joint, table.loads(), demand, i, slot);
        for s in &ex.summaries {
            if s.node > i {
                out.exchanges += 1;
                out.messages += 2;
            }
        }
        reports.extend(detect_conflicts(
            &own,
            &ex.summaries,
            rho,
            config.overload_margin,
        ));
    }
    reports.sort_by_key(|a| a.pair);
    reports.dedup();
    let mut changed: BTreeSet<NodeId> = BTreeSet::new();
    for report in &reports {
        let (i, j) = report.pair;
        if changed.contains(&i) || changed.contains(&j) {
            continue;
        }
        let agreement = negotiate(
            graph,
            joint,
            demand,
            params,
            &table,
            report,
            (&contents[i], &contents[j]),
            epsilon_switch,
            config.shortlist,
        );
        let mut any = false;
        for (node, action) in [(i, agreement.first), (j, agreement.second)] {
            if let Some(a) = action {
                joint.set(node, a.clone());
                out.changes.push((node, a));
                any = true;
            }
        }
        if any {
            changed.insert(i);
            changed.insert(j);
            out.delta += agreement.delta.as_f64();
            table = RouteTable::build(graph, joint, demand);
        }
    }
    out.conflicts = reports;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{potential, ObjectiveWeights};
    use crate::topology::NodeSpec;

    fn spec(id: NodeId, slots: usize) -> NodeSpec<f64> {
        NodeSpec {
            id,
            compute_capacity: 10.0,
            cache_capacity: slots,
            proc_delay: 1.0,
        }
    }

    fn summary(node: NodeId, util: f64, cache: &[ContentId], forward: Forward) -> StateSummary {
        StateSummary {
            node,
            utilization: util,
            load: util * 10.0,
            capacity: 10.0,
            cache: cache.iter().copied().collect(),
            cached_demand: cache.iter().map(|&c| (c, 0.1)).collect(),
            forward,
            slot: 0,
        }
    }

    #[test]
    fn exchange_counts_alive_neighbors() {
        let mut g = FogGraph::with_links(
            (0..5).map(|i| spec(i, 1)).collect(),
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)],
            50.0,
        );
        g.fail_node(4).unwrap();
        let joint = JointAction::empty_for(&g);
        let demand = DemandMatrix::zeros(5, 2);
        let ex = exchange(&g, &joint, &[0.0; 5], &demand, 0, 10);
        assert_eq!(ex.summaries.len(), 3);
        assert_eq!(ex.messages, 6);
    }

    #[test]
    fn summary_reflects_current_action() {
        let g = FogGraph::with_links(vec![spec(0, 1), spec(1, 1)], &[(0, 1, 1.0)], 50.0);
        let mut joint = JointAction::empty_for(&g);
        joint.set(1, NodeAction::new([3], Forward::Node(0)));
        let demand = DemandMatrix::zeros(2, 4);
        let ex = exchange(&g, &joint, &[0.0; 2], &demand, 0, 0);
        assert_eq!(ex.summaries[0].cache, BTreeSet::from([3]));
        assert_eq!(ex.summaries[0].forward, Forward::Node(0));
    }

    #[test]
    fn redundant_replica_detected() {
        let a = summary(0, 0.2, &[1, 2], Forward::Cloud);
        let b = summary(1, 0.2, &[1, 2], Forward::Cloud);
        let r = detect_conflicts(&a, &[b], 0.8, 0.1);
        assert_eq!(r.len(), 2);
        assert!(r
            .iter()
            .all(|c| matches!(c.conflict, ConflictKind::RedundantReplication { .. })));
    }

    #[test]
    fn quiet_neighborhood_has_no_conflicts() {
        let a = summary(0, 0.2, &[1], Forward::Cloud);
        let b = summary(1, 0.3, &[2], Forward::Cloud);
        assert!(detect_conflicts(&a, &[b], 0.8, 0.1).is_empty());
    }

    #[test]
    fn contention_on_hot_target() {
        let a = summary(0, 0.2, &[], Forward::Node(2));
        let b = summary(1, 0.2, &[], Forward::Node(2));
        let hot = summary(2, 0.95, &[], Forward::Cloud);
        let r = detect_conflicts(&a, &[b, hot], 0.8, 0.1);
        assert!(r.iter().any(|c| c.pair == (0, 1)
            && matches!(c.conflict, ConflictKind::Contention { target: 2, .. })));
        // the hot node itself triggers an overload report
        assert!(r.iter().any(|c| c.pair == (0, 2)
            && matches!(c.conflict, ConflictKind::Overload { overloaded: 2, .. })));
    }

    #[test]
    fn overload_needs_margin() {
        let a = summary(0, 0.75, &[], Forward::Cloud);
        let b = summary(1, 0.9, &[], Forward::Cloud);
        assert!(detect_conflicts(&a, std::slice::from_ref(&b), 0.8, 0.1).is_empty());
        let a = summary(0, 0.5, &[], Forward::Cloud);
        assert_eq!(detect_conflicts(&a, &[b], 0.8, 0.1).len(), 1);
    }

    #[test]
    fn redundant_replica_dropped_on_one_node() {
        // both cache content 0 and forward to each other; demand is tiny
        let g = FogGraph::with_links(vec![spec(0, 1), spec(1, 1)], &[(0, 1, 0.01)], 50.0);
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([0], Forward::Node(1))),
            Some(NodeAction::new([0], Forward::Node(0))),
        ]);
        let demand = DemandMatrix::from_rows(vec![vec![0.5], vec![0.5]]);
        let params = ObjectiveParams::with_weights(ObjectiveWeights::new(1.0, 1.0, 1.0));
        let before = potential(&g, &joint, &demand, &params);
        let contents = vec![vec![0], vec![0]];
        let out = coordination_round(
            &g,
            &mut joint,
            &demand,
            &params,
            &CoordinationConfig::default(),
            &contents,
            1e-6,
            0,
        );
        let after = potential(&g, &joint, &demand, &params);
        assert!(after < before);
        assert!((after - before - out.delta).abs() < 1e-9);
        let holders = (0..2)
            .filter(|&i| joint.get(i).unwrap().cache.contains(&0))
            .count();
        assert_eq!(holders, 1);
        assert_eq!(out.changes.len(), 1);
    }

    #[test]
    fn no_improving_pair_keeps_both() {
        let g = FogGraph::with_links(vec![spec(0, 1), spec(1, 1)], &[(0, 1, 5.0)], 50.0);
        let joint = JointAction::new(vec![
            Some(NodeAction::new([0], Forward::Cloud)),
            Some(NodeAction::new([0], Forward::Cloud)),
        ]);
        // heavy demand on both sides: each replica earns its keep
        let demand = DemandMatrix::from_rows(vec![vec![4.0], vec![4.0]]);
        let params = ObjectiveParams::with_weights(ObjectiveWeights::new(1.0, 0.01, 1.0));
        let table = RouteTable::build(&g, &joint, &demand);
        let report = ConflictReport::new(
            0,
            1,
            ConflictKind::RedundantReplication {
                content: 0,
                combined_demand: 8.0,
            },
        );
        let a = negotiate(
            &g,
            &joint,
            &demand,
            &params,
            &table,
            &report,
            (&[0], &[0]),
            1e-6,
            None,
        );
        assert_eq!(a.first, None);
        assert_eq!(a.second, None);
    }

    #[test]
    fn pair_delta_matches_full_difference() {
        let g = FogGraph::with_links(
            (0..3).map(|i| spec(i, 1)).collect(),
            &[(0, 1, 1.0), (1, 2, 2.0)],
            50.0,
        );
        let joint = JointAction::new(vec![Some(NodeAction::empty()); 3]);
        let demand = DemandMatrix::from_rows(vec![vec![1.0, 2.0], vec![0.5, 0.5], vec![3.0, 0.0]]);
        let params = ObjectiveParams::with_weights(ObjectiveWeights::new(1.0, 0.3, 2.0));
        let table = RouteTable::build(&g, &joint, &demand);
        let ai = NodeAction::new([1], Forward::Node(1));
        let aj = NodeAction::new([0], Forward::Node(2));
        let d = pair_delta(&g, &joint, &demand, &params, &table, (0, &ai), (1, &aj));
        let full = potential(&g, &joint.with(0, ai).with(1, aj), &demand, &params)
            - potential(&g, &joint, &demand, &params);
        assert!((d - full).abs() < 1e-9);
    }
}
