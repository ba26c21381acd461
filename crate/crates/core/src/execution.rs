//! Stateless execution layer: serve, replicate and migrate tasks applied to
//! the cache placement, reporting success or a failure reason.

use serde::{Deserialize, Serialize};

use crate::objective::{JointAction, NodeAction};
use crate::scalar::Scalar;
use crate::topology::{FogGraph, NodeId};
use crate::workload::ContentId;

/// Where a replica is copied from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cloud,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Serve {
        node: NodeId,
    },
    Replicate {
        source: Source,
        target: NodeId,
    },
    /// Replicate to `target`, then evict at `source`; both or neither.
    Migrate {
        source: NodeId,
        target: NodeId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub content: ContentId,
    pub slot: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NodeDead,
    CapacityExceeded,
    Unreachable,
    NotCached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(FailureReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionStatus {
    pub task: Task,
    pub outcome: Outcome,
}

impl ExecutionStatus {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

fn caches(joint: &JointAction, node: NodeId, content: ContentId) -> bool {
    joint.get(node).is_some_and(|a| a.cache.contains(&content))
}

fn check_replicate<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    source: Source,
    target: NodeId,
    content: ContentId,
) -> Result<(), FailureReason> {
    if target >= graph.len() || !graph.is_alive(target) {
        return Err(FailureReason::NodeDead);
    }
    if let Source::Node(s) = source {
        if s >= graph.len() || !graph.is_alive(s) {
            return Err(FailureReason::NodeDead);
        }
        if !caches(joint, s, content) {
            return Err(FailureReason::NotCached);
        }
        let reachable = graph.path_delay(s, target).is_ok_and(|d| d.is_finite());
        if !reachable {
            return Err(FailureReason::Unreachable);
        }
    }
    let Some(action) = joint.get(target) else {
        return Err(FailureReason::NodeDead);
    };
    if !action.cache.contains(&content) && action.cache.len() >= graph.node(target).cache_capacity {
        return Err(FailureReason::CapacityExceeded);
    }
    Ok(())
}

fn insert(joint: &mut JointAction, node: NodeId, content: ContentId) {
    let mut a = joint.get(node).cloned().unwrap_or_else(NodeAction::empty);
    a.cache.insert(content);
    joint.set(node, a);
}

fn remove(joint: &mut JointAction, node: NodeId, content: ContentId) {
    if let Some(mut a) = joint.get(node).cloned() {
        a.cache.remove(&content);
        joint.set(node, a);
    }
}

/// Applies `task`. A failure leaves `joint` untouched.
pub fn execute<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &mut JointAction,
    task: Task,
) -> ExecutionStatus {
    let c = task.content;
    let result = match task.kind {
        TaskKind::Serve { node } => {
            if node >= graph.len() || !graph.is_alive(node) {
                Err(FailureReason::NodeDead)
            } else if !caches(joint, node, c) {
                Err(FailureReason::NotCached)
            } else {
                Ok(())
            }
        }
        TaskKind::Replicate { source, target } => {
            check_replicate(graph, joint, source, target, c).map(|()| insert(joint, target, c))
        }
        TaskKind::Migrate { source, target } => {
            check_replicate(graph, joint, Source::Node(source), target, c).map(|()| {
                if source != target {
                    insert(joint, target, c);
                    remove(joint, source, c);
                }
            })
        }
    };
    ExecutionStatus {
        task,
        outcome: match result {
            Ok(()) => Outcome::Success,
            Err(r) => Outcome::Failure(r),
        },
    }
}

/// Realizes `node` switching to `target` action: evictions and forwarding
/// are local, each added content is a replication from the nearest
/// reachable holder (or the cloud). All-or-nothing: if any task fails the
/// placement is restored.
pub fn apply_action<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &mut JointAction,
    node: NodeId,
    target: &NodeAction,
    slot: u64,
) -> Vec<ExecutionStatus> {
    let Some(current) = joint.get(node).cloned() else {
        return Vec::new();
    };
    let backup = current.clone();
    let mut next = current.clone();
    next.cache.retain(|c| target.cache.contains(c));
    next.forward = target.forward;
    joint.set(node, next);
    let mut statuses = Vec::new();
    for &c in target.cache.difference(&current.cache) {
        let source = nearest_holder(graph, joint, node, c).map_or(Source::Cloud, Source::Node);
        let status = execute(
            graph,
            joint,
            Task {
                kind: TaskKind::Replicate {
                    source,
                    target: node,
                },
                content: c,
                slot,
            },
        );
        let failed = !status.succeeded();
        statuses.push(status);
        if failed {
            joint.set(node, backup);
            return statuses;
        }
    }
    statuses
}

fn nearest_holder<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    node: NodeId,
    content: ContentId,
) -> Option<NodeId> {
    let dist = graph.distances_from(node);
    graph
        .alive_nodes()
        .filter(|&j| j != node && caches(joint, j, content) && dist[j].is_finite())
        .min_by(|&a, &b| {
            dist[a]
                .partial_cmp(&dist[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Forward;
    use crate::topology::NodeSpec;

    fn spec(id: NodeId) -> NodeSpec<f64> {
        NodeSpec {
            id,
            compute_capacity: 10.0,
            cache_capacity: 1,
            proc_delay: 1.0,
        }
    }

    fn line() -> FogGraph<f64> {
        FogGraph::with_links(
            (0..3).map(spec).collect(),
            &[(0, 1, 1.0), (1, 2, 1.0)],
            50.0,
        )
    }

    fn task(kind: TaskKind, content: ContentId) -> Task {
        Task {
            kind,
            content,
            slot: 0,
        }
    }

    #[test]
    fn serve_cached_on_alive_node() {
        let g = line();
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::empty()),
            Some(NodeAction::empty()),
        ]);
        let s = execute(&g, &mut joint, task(TaskKind::Serve { node: 0 }, 2));
        assert!(s.succeeded());
        let s = execute(&g, &mut joint, task(TaskKind::Serve { node: 1 }, 2));
        assert_eq!(s.outcome, Outcome::Failure(FailureReason::NotCached));
    }

    #[test]
    fn replicate_into_full_cache_fails_without_mutation() {
        let g = line();
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::new([1], Forward::Cloud)),
            Some(NodeAction::empty()),
        ]);
        let before = joint.clone();
        let s = execute(
            &g,
            &mut joint,
            task(
                TaskKind::Replicate {
                    source: Source::Node(0),
                    target: 1,
                },
                2,
            ),
        );
        assert_eq!(s.outcome, Outcome::Failure(FailureReason::CapacityExceeded));
        assert_eq!(joint, before);
    }

    #[test]
    fn migrate_across_partition_fails_without_mutation() {
        let mut g = line();
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::empty()),
            Some(NodeAction::empty()),
        ]);
        g.fail_node(1).unwrap();
        joint.sanitize(&g);
        let before = joint.clone();
        let s = execute(
            &g,
            &mut joint,
            task(
                TaskKind::Migrate {
                    source: 0,
                    target: 2,
                },
                2,
            ),
        );
        assert_eq!(s.outcome, Outcome::Failure(FailureReason::Unreachable));
        assert_eq!(joint, before);
    }

    #[test]
    fn migrate_moves_exactly_one_copy() {
        let g = line();
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::empty()),
            Some(NodeAction::empty()),
        ]);
        let s = execute(
            &g,
            &mut joint,
            task(
                TaskKind::Migrate {
                    source: 0,
                    target: 2,
                },
                2,
            ),
        );
        assert!(s.succeeded());
        assert!(!joint.get(0).unwrap().cache.contains(&2));
        assert!(joint.get(2).unwrap().cache.contains(&2));
    }

    #[test]
    fn repeated_calls_are_stateless() {
        let g = line();
        let joint = JointAction::new(vec![
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::empty()),
            Some(NodeAction::empty()),
        ]);
        let t = task(
            TaskKind::Replicate {
                source: Source::Node(0),
                target: 2,
            },
            2,
        );
        let (mut a, mut b) = (joint.clone(), joint.clone());
        assert_eq!(execute(&g, &mut a, t), execute(&g, &mut b, t));
        assert_eq!(a, b);
    }

    #[test]
    fn dead_target() {
        let mut g = line();
        let mut joint = JointAction::empty_for(&g);
        g.fail_node(2).unwrap();
        joint.sanitize(&g);
        let s = execute(
            &g,
            &mut joint,
            task(
                TaskKind::Replicate {
                    source: Source::Cloud,
                    target: 2,
                },
                0,
            ),
        );
        assert_eq!(s.outcome, Outcome::Failure(FailureReason::NodeDead));
    }

    #[test]
    fn apply_action_swaps_via_replication() {
        let g = line();
        let mut joint = JointAction::new(vec![
            Some(NodeAction::new([1], Forward::Cloud)),
            Some(NodeAction::new([2], Forward::Cloud)),
            Some(NodeAction::empty()),
        ]);
        let target = NodeAction::new([2], Forward::Node(1));
        let st = apply_action(&g, &mut joint, 0, &target, 3);
        assert_eq!(st.len(), 1);
        assert_eq!(
            st[0].task.kind,
            TaskKind::Replicate {
                source: Source::Node(1),
                target: 0
            }
        );
        assert_eq!(joint.get(0), Some(&target));
    }
}
