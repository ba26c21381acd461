//! Comparison controllers: uncoordinated greedy latency minimization and a
//! periodic centralized optimum over a global snapshot, solved exactly by
//! enumeration or branch and bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{best_response, full_action_space, popularity_order, Decision};
use crate::objective::{JointAction, NodeAction, ObjectiveParams, ObjectiveWeights, RouteTable};
use crate::scalar::Scalar;
use crate::topology::{FogGraph, NodeId};
use crate::workload::{ContentId, DemandMatrix};

/// Greedy move: argmin of the node's own latency under its own demand only.
/// Cost, risk, other nodes' demand and memory are ignored; the current
/// action wins ties.
pub fn greedy_step<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    own_demand: &[S],
    node: NodeId,
    candidates: &[NodeAction],
    epsilon_switch: f64,
) -> Decision {
    let mut demand = DemandMatrix::zeros(graph.len(), own_demand.len());
    for (c, &r) in own_demand.iter().enumerate() {
        demand.set(node, c, r);
    }
    let params = ObjectiveParams::with_weights(ObjectiveWeights::new(1.0, 0.0, 0.0));
    let table = RouteTable::build(graph, joint, &demand);
    best_response(
        candidates,
        |a| {
            table
                .deviation_delta(graph, joint, &params, node, a)
                .as_f64()
        },
        epsilon_switch,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Exhaustive when the joint space fits the limit, otherwise branch and bound.
    Auto,
    Exhaustive,
    BranchAndBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlpConfig {
    /// Slots between re-solves.
    pub period: u64,
    pub method: SolveMethod,
    /// Branch-and-bound node budget per solve.
    pub budget: u64,
    /// Largest joint-action count solved by enumeration.
    pub exhaustive_limit: f64,
    /// Per-node content domain: top-k by snapshot demand (`None` for all).
    pub contents_per_node: Option<usize>,
    /// Seed the incumbent with centralized best-response descent.
    pub warm_start: bool,
}

impl Default for IlpConfig {
    fn default() -> Self {
        Self {
            period: 50,
            method: SolveMethod::Auto,
            budget: 2_000,
            exhaustive_limit: 1e6,
            contents_per_node: Some(6),
            warm_start: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IlpError {
    #[error("exhaustive search over {0:.3e} joint actions exceeds the limit {1:.3e}")]
    TooLarge(f64, f64),
}

/// One global snapshot: every alive node chooses from its domain.
#[derive(Debug, Clone)]
pub struct IlpInstance<S> {
    pub graph: FogGraph<S>,
    pub demand: DemandMatrix<S>,
    pub params: ObjectiveParams<S>,
    pub domains: Vec<(NodeId, Vec<NodeAction>)>,
    pub snapshot_slot: u64,
}

impl<S: Scalar> IlpInstance<S> {
    pub fn new(
        graph: FogGraph<S>,
        demand: DemandMatrix<S>,
        params: ObjectiveParams<S>,
        contents_per_node: Option<usize>,
        snapshot_slot: u64,
    ) -> Self {
        let domains = graph
            .alive_nodes()
            .map(|i| {
                let mut contents: Vec<ContentId> = match contents_per_node {
                    Some(k) => popularity_order(demand.row(i))
                        .into_iter()
                        .take(k)
                        .collect(),
                    None => (0..demand.contents()).collect(),
                };
                contents.sort_unstable();
                (
                    i,
                    full_action_space(&graph, i, &NodeAction::empty(), &contents),
                )
            })
            .collect();
        Self {
            graph,
            demand,
            params,
            domains,
            snapshot_slot,
        }
    }

    pub fn joint_count(&self) -> f64 {
        self.domains.iter().map(|d| d.1.len() as f64).product()
    }

    fn joint_from(&self, choice: &[usize]) -> JointAction {
        let mut joint = JointAction::empty_for(&self.graph);
        for ((node, dom), &k) in self.domains.iter().zip(choice) {
            joint.set(*node, dom[k].clone());
        }
        joint
    }

    pub fn value(&self, joint: &JointAction) -> S {
        RouteTable::build(&self.graph, joint, &self.demand)
            .evaluate(&self.graph, joint, &self.params)
            .value
            .scalar
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Budget ran out; `gap` is incumbent minus the root lower bound.
    BudgetExhausted {
        gap: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlpSolution<S> {
    pub joint: JointAction,
    pub value: S,
    pub status: SolveStatus,
    pub explored: u64,
}

/// Exact minimizer of the objective over the instance's joint space.
///
/// The cloud fallback makes every instance feasible: the all-empty,
/// cloud-forwarding joint action is always in the space.
pub fn solve_ilp<S: Scalar>(
    instance: &IlpInstance<S>,
    config: &IlpConfig,
) -> Result<IlpSolution<S>, IlpError> {
    let count = instance.joint_count();
    let method = match config.method {
        SolveMethod::Auto if count <= config.exhaustive_limit => SolveMethod::Exhaustive,
        SolveMethod::Auto => SolveMethod::BranchAndBound,
        m => m,
    };
    match method {
        SolveMethod::Exhaustive if count > config.exhaustive_limit => {
            Err(IlpError::TooLarge(count, config.exhaustive_limit))
        }
        SolveMethod::Exhaustive => Ok(exhaustive(instance)),
        _ => {
            let warm = config.warm_start.then(|| descend(instance));
            Ok(branch_and_bound(instance, config.budget, warm))
        }
    }
}

fn exhaustive<S: Scalar>(instance: &IlpInstance<S>) -> IlpSolution<S> {
    let n = instance.domains.len();
    let mut choice = vec![0usize; n];
    let mut best_joint = instance.joint_from(&choice);
    let mut best = instance.value(&best_joint);
    let mut explored = 1;
    'outer: loop {
        let mut d = n;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            choice[d] += 1;
            if choice[d] < instance.domains[d].1.len() {
                break;
            }
            choice[d] = 0;
        }
        let joint = instance.joint_from(&choice);
        let v = instance.value(&joint);
        explored += 1;
        if v < best {
            best = v;
            best_joint = joint;
        }
    }
    IlpSolution {
        joint: best_joint,
        value: best,
        status: SolveStatus::Optimal,
        explored,
    }
}

/// Centralized best-response descent over the instance domains, starting
/// from empty caches and cloud forwarding.
pub fn descend<S: Scalar>(instance: &IlpInstance<S>) -> JointAction {
    let g = &instance.graph;
    let mut joint = JointAction::empty_for(g);
    for (node, dom) in &instance.domains {
        joint.set(*node, dom[0].clone());
    }
    let tol = S::lit(1e-12);
    for _ in 0..1000 {
        let mut moved = false;
        for (node, dom) in &instance.domains {
            let table = RouteTable::build(g, &joint, &instance.demand);
            let mut best = (S::zero(), None);
            for a in dom {
                let d = table.deviation_delta(g, &joint, &instance.params, *node, a);
                if d < best.0 - tol {
                    best = (d, Some(a));
                }
            }
            if let (_, Some(a)) = best {
                joint.set(*node, a.clone());
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    joint
}

struct Bounder<S> {
    /// Cheapest possible completion of a request that reaches node `w` unassigned.
    completion: Vec<S>,
    pairs: Vec<(NodeId, ContentId, S)>,
    total: S,
}

impl<S: Scalar> Bounder<S> {
    fn new(instance: &IlpInstance<S>) -> Self {
        let g = &instance.graph;
        let dist = g.all_pairs_delays();
        let completion = (0..g.len())
            .map(|w| {
                g.alive_nodes()
                    .map(|x| dist[w][x] + g.node(x).proc_delay)
                    .fold(g.cloud_delay, |m, v| if v < m { v } else { m })
            })
            .collect();
        let mut pairs = Vec::new();
        let mut total = S::zero();
        for k in g.alive_nodes() {
            for c in 0..instance.demand.contents() {
                let r = instance.demand.rate(k, c);
                if r > S::zero() {
                    pairs.push((k, c, r));
                    total = total + r;
                }
            }
        }
        Self {
            completion,
            pairs,
            total,
        }
    }

    /// Lower bound on the objective of any completion of `joint`, where
    /// only nodes with `assigned` set have final actions. Loads counted
    /// from fully resolved chains can only grow, and every term is
    /// nondecreasing in load.
    fn bound(&self, instance: &IlpInstance<S>, joint: &JointAction, assigned: &[bool]) -> S {
        let g = &instance.graph;
        let p = &instance.params;
        let mut load = vec![S::zero(); g.len()];
        let mut served: Vec<(S, NodeId, S)> = Vec::new();
        let mut lat = S::zero();
        let mut path: Vec<NodeId> = Vec::new();
        for &(k, c, rate) in &self.pairs {
            path.clear();
            let mut cur = k;
            let mut hops = S::zero();
            loop {
                if !assigned[cur] {
                    lat = lat + rate * (hops + self.completion[cur]);
                    break;
                }
                path.push(cur);
                let a = joint.get(cur).expect("assigned node has an action");
                if a.cache.contains(&c) {
                    load[cur] = load[cur] + rate;
                    served.push((rate, cur, hops));
                    break;
                }
                let next = match a.forward {
                    crate::objective::Forward::Node(j) if g.is_alive(j) && !path.contains(&j) => {
                        g.link_delay(cur, j).map(|d| (j, d))
                    }
                    _ => None,
                };
                match next {
                    Some((j, d)) => {
                        hops = hops + d;
                        cur = j;
                    }
                    None => {
                        lat = lat + rate * (hops + g.cloud_delay);
                        break;
                    }
                }
            }
        }
        for &(rate, s, hops) in &served {
            let spec = g.node(s);
            lat = lat
                + rate * (hops + spec.proc_delay * (S::one() + load[s] / spec.compute_capacity));
        }
        let latency = if self.total > S::zero() {
            lat / self.total
        } else {
            S::zero()
        };
        let mut cost = S::zero();
        let mut risk = S::zero();
        for (i, &a) in assigned.iter().enumerate() {
            if a && g.is_alive(i) {
                let stored = joint.get(i).map_or(0, |x| x.cache.len());
                cost = cost + p.c_store * S::lit(stored as f64);
            }
            if g.is_alive(i) {
                cost = cost + p.c_serve * load[i];
                risk = risk + p.risk(load[i], g.node(i).compute_capacity);
            }
        }
        p.weights.alpha * latency + p.weights.beta * cost + p.weights.gamma * risk
    }
}

/// Depth-first branch and bound in the same order as enumeration. A
/// subtree is pruned only when its bound strictly exceeds the incumbent,
/// so the first optimum in enumeration order is always reached.
fn branch_and_bound<S: Scalar>(
    instance: &IlpInstance<S>,
    budget: u64,
    warm: Option<JointAction>,
) -> IlpSolution<S> {
    let bounder = Bounder::new(instance);
    let n = instance.domains.len();
    let g = &instance.graph;
    let mut assigned = vec![false; g.len()];
    let mut joint = JointAction::empty_for(g);
    let root = bounder.bound(instance, &joint, &assigned);
    let scale = S::lit(1e-9) * (S::one() + root.abs());

    let mut best: Option<(S, JointAction)> = warm.map(|w| (instance.value(&w), w));
    let mut explored = 0u64;
    let mut exhausted = false;
    let mut choice = vec![0usize; n];
    let mut depth = 0usize;
    // iterative DFS: choice[depth] is the next domain index to try at depth
    loop {
        if depth == n {
            unreachable!();
        }
        let (node, dom) = &instance.domains[depth];
        if choice[depth] >= dom.len() {
            choice[depth] = 0;
            assigned[*node] = false;
            joint.clear(*node);
            if depth == 0 {
                break;
            }
            depth -= 1;
            continue;
        }
        if explored >= budget {
            exhausted = true;
            break;
        }
        explored += 1;
        let k = choice[depth];
        choice[depth] += 1;
        joint.set(*node, dom[k].clone());
        assigned[*node] = true;
        if depth + 1 == n {
            let v = instance.value(&joint);
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, joint.clone()));
            }
            continue;
        }
        if let Some((inc, _)) = &best {
            if bounder.bound(instance, &joint, &assigned) > *inc + scale {
                continue;
            }
        }
        depth += 1;
    }
    let (value, joint) = match best {
        Some(b) => b,
        None => {
            let mut j = JointAction::empty_for(g);
            for (node, dom) in &instance.domains {
                j.set(*node, dom[0].clone());
            }
            (instance.value(&j), j)
        }
    };
    IlpSolution {
        status: if exhausted {
            SolveStatus::BudgetExhausted {
                gap: (value - root).as_f64().max(0.0),
            }
        } else {
            SolveStatus::Optimal
        },
        joint,
        value,
        explored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::move_neighborhood;
    use crate::objective::Forward;
    use crate::topology::NodeSpec;
    use proptest::prelude::*;

    fn spec(id: NodeId, cap: f64, slots: usize, proc: f64) -> NodeSpec<f64> {
        NodeSpec {
            id,
            compute_capacity: cap,
            cache_capacity: slots,
            proc_delay: proc,
        }
    }

    fn exact(method: SolveMethod) -> IlpConfig {
        IlpConfig {
            method,
            budget: u64::MAX,
            warm_start: false,
            contents_per_node: None,
            ..IlpConfig::default()
        }
    }

    #[test]
    fn greedy_adds_most_demanded() {
        let g = FogGraph::with_links(
            vec![spec(0, 10.0, 1, 1.0), spec(1, 10.0, 1, 1.0)],
            &[(0, 1, 1.0)],
            50.0,
        );
        let joint = JointAction::new(vec![Some(NodeAction::empty()), Some(NodeAction::empty())]);
        let row = [1.0, 3.0, 2.0];
        let cands = move_neighborhood(&g, 0, joint.get(0).unwrap(), &[0, 1, 2]);
        let d = greedy_step(&g, &joint, &row, 0, &cands, 1e-9);
        assert_eq!(d.action, NodeAction::new([1], Forward::Cloud));
    }

    #[test]
    fn greedy_idle_node_keeps() {
        let g = FogGraph::with_links(
            vec![spec(0, 10.0, 1, 1.0), spec(1, 10.0, 1, 1.0)],
            &[(0, 1, 1.0)],
            50.0,
        );
        let joint = JointAction::new(vec![Some(NodeAction::empty()), Some(NodeAction::empty())]);
        let cands = move_neighborhood(&g, 0, joint.get(0).unwrap(), &[0, 1]);
        let d = greedy_step(&g, &joint, &[0.0, 0.0], 0, &cands, 1e-9);
        assert!(!d.switched);
    }

    #[test]
    fn two_nodes_split_catalog() {
        let g = FogGraph::with_links(
            vec![spec(0, 10.0, 1, 1.0), spec(1, 10.0, 1, 1.0)],
            &[(0, 1, 1.0)],
            50.0,
        );
        let demand = DemandMatrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let params = ObjectiveParams::default();
        let inst = IlpInstance::new(g, demand, params, None, 0);
        let sol = solve_ilp(&inst, &exact(SolveMethod::Exhaustive)).unwrap();
        let a = &sol.joint.get(0).unwrap().cache;
        let b = &sol.joint.get(1).unwrap().cache;
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_ne!(a, b);
        let bb = solve_ilp(&inst, &exact(SolveMethod::BranchAndBound)).unwrap();
        assert_eq!(bb.value, sol.value);
    }

    #[test]
    fn single_node_caches_top_contents() {
        let g = FogGraph::with_links(vec![spec(0, 100.0, 2, 1.0)], &[], 50.0);
        let demand = DemandMatrix::from_rows(vec![vec![0.5, 3.0, 1.0, 2.0]]);
        let params = ObjectiveParams::with_weights(ObjectiveWeights::new(1.0, 0.0, 0.0));
        let inst = IlpInstance::new(g, demand, params, None, 0);
        let sol = solve_ilp(&inst, &exact(SolveMethod::Auto)).unwrap();
        assert_eq!(
            sol.joint.get(0).unwrap().cache,
            [1, 3].into_iter().collect()
        );
    }

    #[test]
    fn exhaustive_refuses_large_spaces() {
        let g = FogGraph::with_links(vec![spec(0, 10.0, 2, 1.0)], &[], 50.0);
        let inst = IlpInstance::new(
            g,
            DemandMatrix::from_rows(vec![vec![1.0; 4]]),
            ObjectiveParams::default(),
            None,
            0,
        );
        let cfg = IlpConfig {
            exhaustive_limit: 3.0,
            ..exact(SolveMethod::Exhaustive)
        };
        assert!(matches!(
            solve_ilp(&inst, &cfg),
            Err(IlpError::TooLarge(..))
        ));
    }

    #[test]
    fn tiny_budget_reports_gap() {
        let g = FogGraph::with_links(
            (0..3).map(|i| spec(i, 5.0, 2, 1.0)).collect(),
            &[(0, 1, 1.0), (1, 2, 1.0)],
            50.0,
        );
        let demand = DemandMatrix::from_rows(vec![vec![1.0, 2.0, 3.0]; 3]);
        let inst = IlpInstance::new(g, demand, ObjectiveParams::default(), None, 0);
        let cfg = IlpConfig {
            budget: 5,
            ..exact(SolveMethod::BranchAndBound)
        };
        let sol = solve_ilp(&inst, &cfg).unwrap();
        assert!(matches!(sol.status, SolveStatus::BudgetExhausted { .. }));
        assert!(sol.value.is_finite());
    }

    fn tiny_instance(seed: u64) -> IlpInstance<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=3);
        let nodes = (0..n)
            .map(|i| {
                spec(
                    i,
                    rng.gen_range(1.0..6.0),
                    rng.gen_range(1..=2),
                    rng.gen_range(0.5..2.0),
                )
            })
            .collect();
        let mut links = Vec::new();
        for i in 1..n {
            links.push((rng.gen_range(0..i), i, rng.gen_range(1.0..5.0)));
        }
        let g = FogGraph::with_links(nodes, &links, 20.0);
        let rows = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(0.0..3.0)).collect())
            .collect();
        let params = ObjectiveParams::with_weights(ObjectiveWeights::new(
            1.0,
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
        ));
        IlpInstance::new(g, DemandMatrix::from_rows(rows), params, None, 0)
    }

    #[test]
    fn branch_and_bound_matches_exhaustive_on_tiny_instances() {
        for seed in 0..50 {
            let inst = tiny_instance(seed);
            let ex = solve_ilp(&inst, &exact(SolveMethod::Exhaustive)).unwrap();
            let bb = solve_ilp(&inst, &exact(SolveMethod::BranchAndBound)).unwrap();
            assert_eq!(bb.status, SolveStatus::Optimal);
            assert_eq!(bb.value, ex.value, "seed {seed}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bound_never_exceeds_any_completion(seed in 0u64..10_000) {
            let inst = tiny_instance(seed);
            let bounder = Bounder::new(&inst);
            let ex = solve_ilp(&inst, &exact(SolveMethod::Exhaustive)).unwrap();
            // root bound and every prefix of the optimum lower-bound the optimum
            let mut assigned = vec![false; inst.graph.len()];
            let mut joint = JointAction::empty_for(&inst.graph);
            prop_assert!(bounder.bound(&inst, &joint, &assigned) <= ex.value + 1e-9);
            for (node, _) in &inst.domains {
                joint.set(*node, ex.joint.get(*node).unwrap().clone());
                assigned[*node] = true;
                prop_assert!(bounder.bound(&inst, &joint, &assigned) <= ex.value + 1e-9);
            }
            prop_assert!((bounder.bound(&inst, &joint, &assigned) - ex.value).abs() < 1e-9);
        }

        #[test]
        fn descent_is_no_better_than_optimum(seed in 0u64..10_000) {
            let inst = tiny_instance(seed);
            let ex = solve_ilp(&inst, &exact(SolveMethod::Exhaustive)).unwrap();
            let local = descend(&inst);
            prop_assert!(ex.value <= inst.value(&local) + 1e-12);
        }
    }
}
