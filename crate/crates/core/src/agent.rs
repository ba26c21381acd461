//! Fog agents: local observation, marginal-contribution utilities and
//! bounded-rational best response over a move neighborhood.
//!
//! Three utility modes exist. The oracle mode evaluates the exact change of
//! the potential for a unilateral deviation. The estimated mode reads only
//! the agent's local memory and the shared outcome history, keyed by a
//! discretized context and a coarse action class. The informed mode prices
//! the move's effect on the agent's own contribution from its 1-hop view and
//! adds the class-mean of what that model missed in past episodes.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::objective::{
    resolve_route, Forward, JointAction, NodeAction, ObjectiveParams, RouteTable,
};
use crate::scalar::Scalar;
use crate::shared_memory::{EpisodeRecord, Estimate, SharedMemory, SharedView};
use crate::topology::{FogGraph, NodeId};
use crate::workload::{ContentId, DemandMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Med,
    High,
}

/// Discretized local state used to condition estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub demand: Level,
    pub utilization: Level,
}

/// Local popularity tier of a content (by the agent's own demand ranking).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    /// ranks 1-2
    Top,
    /// ranks 3-5
    High,
    /// ranks 6-10
    Mid,
    Tail,
}

impl Tier {
    pub fn of_rank(rank: usize) -> Self {
        match rank {
            0..=1 => Tier::Top,
            2..=4 => Tier::High,
            5..=9 => Tier::Mid,
            _ => Tier::Tail,
        }
    }
}

/// Coarse description of a move, the key of the outcome estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionClass {
    Keep,
    Add {
        tier: Tier,
        neighbor_has: bool,
    },
    Evict {
        tier: Tier,
        neighbor_has: bool,
    },
    Swap {
        out: Tier,
        into: Tier,
    },
    /// Forward misses to the neighbor ranked `rank` by local coverage (capped at 3).
    ForwardNeighbor {
        rank: u8,
    },
    ForwardCloud,
    /// Any other multi-field change (full-enumeration neighborhoods).
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMode {
    Oracle,
    Estimated,
    Informed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub mode: UtilityMode,
    /// Minimum improvement required to leave the current action.
    pub epsilon_switch: f64,
    /// Probability of first evaluating one random candidate under the prior
    /// alone and taking it if that promises an improvement.
    pub epsilon_explore: f64,
    /// Estimate assumed for never-seen (context, action class) pairs.
    pub prior: f64,
    /// Restrict add/swap moves to the locally top-k demanded contents.
    pub candidate_contents: Option<usize>,
    /// Replace the move neighborhood with every feasible action.
    pub full_enumeration: bool,
    /// Local memory length in episodes.
    pub local_memory: usize,
    /// Per-slot probability that an agent is activated.
    pub activation_prob: f64,
    /// Smoothing factor of the per-content local demand estimate.
    pub demand_smoothing: f64,
    /// Slots compared by the demand drift test (0 disables it).
    pub drift_window: usize,
    /// The drift test fires when its statistic exceeds this many times the catalog size.
    pub drift_threshold: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            mode: UtilityMode::Informed,
            epsilon_switch: 1e-4,
            epsilon_explore: 0.05,
            prior: -0.01,
            candidate_contents: Some(8),
            full_enumeration: false,
            local_memory: 20,
            activation_prob: 0.25,
            demand_smoothing: 0.05,
            drift_window: 10,
            drift_threshold: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCondition {
    pub neighbor: NodeId,
    pub delay: f64,
    pub reachable: bool,
}

/// What an agent can see of its own node and its one-hop neighborhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalState {
    pub node: NodeId,
    /// Expected service rate at the node under current routing.
    pub queue: f64,
    pub utilization: f64,
    pub cache: BTreeSet<ContentId>,
    pub links: Vec<LinkCondition>,
    pub action: NodeAction,
    pub demand_rate: f64,
}

/// Read access to the world restricted to one node and its neighbors.
/// Every node whose private state is read is recorded.
pub struct LocalView<'a, S> {
    graph: &'a FogGraph<S>,
    joint: &'a JointAction,
    demand: &'a DemandMatrix<S>,
    loads: &'a [S],
    node: NodeId,
    trace: RefCell<BTreeSet<NodeId>>,
}

impl<'a, S: Scalar> LocalView<'a, S> {
    pub fn new(
        graph: &'a FogGraph<S>,
        joint: &'a JointAction,
        demand: &'a DemandMatrix<S>,
        loads: &'a [S],
        node: NodeId,
    ) -> Self {
        Self {
            graph,
            joint,
            demand,
            loads,
            node,
            trace: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn graph(&self) -> &'a FogGraph<S> {
        self.graph
    }

    fn touch(&self, j: NodeId) {
        assert!(
            j == self.node || self.graph.link_delay(self.node, j).is_some(),
            "node {} read private state of non-neighbor {j}",
            self.node
        );
        self.trace.borrow_mut().insert(j);
    }

    pub fn own_action(&self) -> Option<&'a NodeAction> {
        self.touch(self.node);
        self.joint.get(self.node)
    }

    pub fn own_demand(&self) -> &'a [S] {
        self.touch(self.node);
        self.demand.row(self.node)
    }

    pub fn neighbor_action(&self, j: NodeId) -> Option<&'a NodeAction> {
        self.touch(j);
        self.joint.get(j)
    }

    pub fn load(&self, j: NodeId) -> S {
        self.touch(j);
        self.loads[j]
    }

    /// Every incident link with the neighbor's liveness.
    pub fn links(&self) -> Vec<LinkCondition> {
        self.graph
            .all_neighbors(self.node)
            .iter()
            .map(|&(j, d)| LinkCondition {
                neighbor: j,
                delay: d.as_f64(),
                reachable: self.graph.is_alive(j),
            })
            .collect()
    }

    pub fn accessed(&self) -> BTreeSet<NodeId> {
        self.trace.borrow().clone()
    }
}

pub fn observe<S: Scalar>(view: &LocalView<'_, S>) -> LocalState {
    let node = view.node();
    let action = view.own_action().cloned().unwrap_or_else(NodeAction::empty);
    let queue = view.load(node).as_f64();
    let cap = view.graph().node(node).compute_capacity.as_f64();
    let demand_rate = view.own_demand().iter().map(|r| r.as_f64()).sum();
    LocalState {
        node,
        queue,
        utilization: queue / cap,
        cache: action.cache.clone(),
        links: view.links(),
        action,
        demand_rate,
    }
}

pub fn context_key(state: &LocalState, compute_capacity: f64, rho_max: f64) -> ContextKey {
    let relative = state.demand_rate / compute_capacity;
    let demand = if relative < 0.3 {
        Level::Low
    } else if relative < 0.7 {
        Level::Med
    } else {
        Level::High
    };
    let utilization = if state.utilization < 0.5 {
        Level::Low
    } else if state.utilization < rho_max {
        Level::Med
    } else {
        Level::High
    };
    ContextKey {
        demand,
        utilization,
    }
}

/// Contents sorted by descending local demand, ties by id.
pub fn popularity_order<S: Scalar>(row: &[S]) -> Vec<ContentId> {
    let mut order: Vec<ContentId> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Candidate moves from `current`: keep first, then the rest in
/// lexicographic order. `contents` limits which items may be added.
pub fn move_neighborhood<S: Scalar>(
    graph: &FogGraph<S>,
    node: NodeId,
    current: &NodeAction,
    contents: &[ContentId],
) -> Vec<NodeAction> {
    let capacity = graph.node(node).cache_capacity;
    let mut out = BTreeSet::new();
    let uncached: Vec<ContentId> = contents
        .iter()
        .copied()
        .filter(|c| !current.cache.contains(c))
        .collect();
    if current.cache.len() < capacity {
        for &c in &uncached {
            let mut a = current.clone();
            a.cache.insert(c);
            out.insert(a);
        }
    }
    for &x in &current.cache {
        let mut a = current.clone();
        a.cache.remove(&x);
        out.insert(a.clone());
        for &y in &uncached {
            let mut s = a.clone();
            s.cache.insert(y);
            out.insert(s);
        }
    }
    let mut targets: Vec<Forward> = graph
        .neighbors(node)
        .map(|(j, _)| Forward::Node(j))
        .collect();
    targets.push(Forward::Cloud);
    for f in targets {
        if f != current.forward {
            out.insert(NodeAction {
                cache: current.cache.clone(),
                forward: f,
            });
        }
    }
    out.remove(current);
    let mut list = Vec::with_capacity(out.len() + 1);
    list.push(current.clone());
    list.extend(out);
    list
}

/// Every feasible action of `node`: cache subsets up to capacity times
/// forwarding targets. Current action first.
pub fn full_action_space<S: Scalar>(
    graph: &FogGraph<S>,
    node: NodeId,
    current: &NodeAction,
    contents: &[ContentId],
) -> Vec<NodeAction> {
    let capacity = graph.node(node).cache_capacity;
    let mut subsets: Vec<BTreeSet<ContentId>> = vec![BTreeSet::new()];
    for &c in contents {
        let grown: Vec<_> = subsets
            .iter()
            .filter(|s| s.len() < capacity)
            .map(|s| {
                let mut t = s.clone();
                t.insert(c);
                t
            })
            .collect();
        subsets.extend(grown);
    }
    let mut targets: Vec<Forward> = graph
        .neighbors(node)
        .map(|(j, _)| Forward::Node(j))
        .collect();
    targets.push(Forward::Cloud);
    let mut out: BTreeSet<NodeAction> = subsets
        .into_iter()
        .flat_map(|cache| {
            targets.iter().map(move |&forward| NodeAction {
                cache: cache.clone(),
                forward,
            })
        })
        .collect();
    out.remove(current);
    let mut list = vec![current.clone()];
    list.extend(out);
    list
}

/// Classification inputs gathered once per activation.
#[derive(Debug, Clone)]
pub struct Classifier {
    rank: Vec<usize>,
    neighbor_cached: BTreeSet<ContentId>,
    neighbor_rank: Vec<(NodeId, u8)>,
}

impl Classifier {
    pub fn new<S: Scalar>(view: &LocalView<'_, S>) -> Self {
        let row = view.own_demand();
        let order = popularity_order(row);
        let mut rank = vec![0; row.len()];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        let mut neighbor_cached = BTreeSet::new();
        let mut coverage: Vec<(NodeId, f64, f64)> = Vec::new();
        for (j, d) in view.graph().neighbors(view.node()) {
            let cache = view
                .neighbor_action(j)
                .map(|a| a.cache.clone())
                .unwrap_or_default();
            let covered: f64 = cache
                .iter()
                .filter(|&&c| c < row.len())
                .map(|&c| row[c].as_f64())
                .sum();
            neighbor_cached.extend(cache);
            coverage.push((j, covered, d.as_f64()));
        }
        coverage.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.2.total_cmp(&b.2))
                .then(a.0.cmp(&b.0))
        });
        let neighbor_rank = coverage
            .iter()
            .enumerate()
            .map(|(r, &(j, _, _))| (j, r.min(3) as u8))
            .collect();
        Self {
            rank,
            neighbor_cached,
            neighbor_rank,
        }
    }

    fn tier(&self, c: ContentId) -> Tier {
        Tier::of_rank(self.rank.get(c).copied().unwrap_or(usize::MAX))
    }

    pub fn classify(&self, current: &NodeAction, candidate: &NodeAction) -> ActionClass {
        if current == candidate {
            return ActionClass::Keep;
        }
        let added: Vec<_> = candidate
            .cache
            .difference(&current.cache)
            .copied()
            .collect();
        let removed: Vec<_> = current
            .cache
            .difference(&candidate.cache)
            .copied()
            .collect();
        let forward_changed = current.forward != candidate.forward;
        match (added.as_slice(), removed.as_slice(), forward_changed) {
            ([a], [], false) => ActionClass::Add {
                tier: self.tier(*a),
                neighbor_has: self.neighbor_cached.contains(a),
            },
            ([], [r], false) => ActionClass::Evict {
                tier: self.tier(*r),
                neighbor_has: self.neighbor_cached.contains(r),
            },
            ([a], [r], false) => ActionClass::Swap {
                out: self.tier(*r),
                into: self.tier(*a),
            },
            ([], [], true) => match candidate.forward {
                Forward::Cloud => ActionClass::ForwardCloud,
                Forward::Node(j) => ActionClass::ForwardNeighbor {
                    rank: self
                        .neighbor_rank
                        .iter()
                        .find(|e| e.0 == j)
                        .map_or(3, |e| e.1),
                },
            },
            _ => ActionClass::Other,
        }
    }
}

/// The agent's own bounded record of past outcomes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalMemory {
    capacity: usize,
    /// (context, class, observed delta, predicted part)
    entries: VecDeque<(ContextKey, ActionClass, f64, f64)>,
}

impl LocalMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, context: ContextKey, action: ActionClass, delta: f64, predicted: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((context, action, delta, predicted));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn estimate(&self, context: ContextKey, action: ActionClass) -> Estimate {
        self.fold(context, action, |e| e.2)
    }

    pub fn residual(&self, context: ContextKey, action: ActionClass) -> Estimate {
        self.fold(context, action, |e| e.2 - e.3)
    }

    fn fold(
        &self,
        context: ContextKey,
        action: ActionClass,
        value: impl Fn(&(ContextKey, ActionClass, f64, f64)) -> f64,
    ) -> Estimate {
        let (sum, n) = self
            .entries
            .iter()
            .filter(|e| e.0 == context && e.1 == action)
            .fold((0.0, 0), |(s, n), e| (s + value(e), n + 1));
        Estimate::from_samples(sum, n)
    }
}

/// Exact change of the potential if `node` alone switches to `candidate`.
pub fn utility_oracle<S: Scalar>(
    table: &RouteTable<S>,
    graph: &FogGraph<S>,
    joint: &JointAction,
    params: &ObjectiveParams<S>,
    node: NodeId,
    candidate: &NodeAction,
) -> S {
    table.deviation_delta(graph, joint, params, node, candidate)
}

/// Count-weighted merge of local and shared outcome means; `prior` when
/// neither has seen the pair. Keeping the current action is worth zero.
pub fn utility_estimated(
    shared: &SharedView<'_>,
    local: &LocalMemory,
    agent: Option<NodeId>,
    context: ContextKey,
    class: ActionClass,
    prior: f64,
) -> f64 {
    if class == ActionClass::Keep {
        return 0.0;
    }
    merge([
        local.estimate(context, class),
        shared.query_estimate(agent, context, class),
    ])
    .unwrap_or(prior)
}

fn merge(parts: [Estimate; 2]) -> Option<f64> {
    let (s, n) = parts.into_iter().fold((0.0, 0usize), |(s, n), e| match e {
        Estimate::Unseen => (s, n),
        Estimate::Seen { mean, count } => (s + mean * count as f64, n + count),
    });
    (n > 0).then(|| s / n as f64)
}

/// `local` plus the count-weighted mean residual of past episodes, or plus
/// `prior` when the pair is unseen.
pub fn utility_informed(
    local: f64,
    shared: &SharedView<'_>,
    memory: &LocalMemory,
    agent: Option<NodeId>,
    context: ContextKey,
    class: ActionClass,
    prior: f64,
) -> f64 {
    if class == ActionClass::Keep {
        return 0.0;
    }
    local
        + merge([
            memory.residual(context, class),
            shared.query_residual(agent, context, class),
        ])
        .unwrap_or(prior)
}

/// Requests for one content forwarded into a node, as counted at its ports.
#[derive(Debug, Clone, PartialEq)]
pub struct Inflow {
    pub content: ContentId,
    pub rate: f64,
    /// Neighbors of the receiving node the requests crossed on the way in.
    pub via: Vec<NodeId>,
}

/// Expected forwarded traffic arriving at `node` under the table's demand,
/// grouped by content and by the neighbors crossed upstream.
pub fn observed_inflow<S: Scalar>(
    graph: &FogGraph<S>,
    table: &RouteTable<S>,
    node: NodeId,
) -> Vec<Inflow> {
    let mut flows: BTreeMap<(ContentId, Vec<NodeId>), f64> = BTreeMap::new();
    for idx in table.indices_through(node) {
        let path = table.path(idx);
        let Some(p) = path.iter().position(|&v| v == node).filter(|&p| p > 0) else {
            continue;
        };
        let (_, c, rate) = table.pair(idx);
        let mut via: Vec<NodeId> = path[..p]
            .iter()
            .copied()
            .filter(|&v| graph.link_delay(node, v).is_some())
            .collect();
        via.sort_unstable();
        *flows.entry((c, via)).or_insert(0.0) += rate.as_f64();
    }
    flows
        .into_iter()
        .map(|((content, via), rate)| Inflow { content, rate, via })
        .collect()
}

/// One-hop model of the agent's share of the potential: its own requests
/// plus the requests forwarded into it, the storage and serving cost of
/// those requests, and overload risk at the nodes they touch. Upstream
/// nodes do not change their behavior in the model. A miss at the forwarding neighbor
/// costs what that neighbor advertises for the content (latency from it
/// onward and whether a fog node serves it); routes that come back through
/// the agent are priced as the cloud. `total_demand` normalizes latency
/// the way the global mean does.
pub struct LocalModel {
    cloud: f64,
    rho: f64,
    weights: [f64; 3],
    c_store: f64,
    c_serve: f64,
    total_demand: f64,
    current: NodeAction,
    /// (content, rate, neighbor indices already crossed)
    requests: Vec<(ContentId, f64, Vec<usize>)>,
    neighbors: Vec<Hop>,
    own: Hop,
    base: f64,
}

struct Hop {
    id: NodeId,
    delay: f64,
    proc: f64,
    capacity: f64,
    base: f64,
    cache: Vec<bool>,
    reach: Vec<Option<Advert>>,
}

/// What a neighbor tells the agent about reaching one content through it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advert {
    /// Latency from the neighbor onward.
    pub latency: f64,
    /// For fog service: added latency of the server's other traffic and
    /// added risk, per unit of extra rate.
    pub marginal: Option<(f64, f64)>,
}

impl Advert {
    /// What `from` advertises to `to` for `content`. A chain that comes back
    /// through `to` ends in the cloud after the hops taken to get there.
    pub fn of<S: Scalar>(
        graph: &FogGraph<S>,
        joint: &JointAction,
        table: &RouteTable<S>,
        rho_max: S,
        from: NodeId,
        to: NodeId,
        content: ContentId,
    ) -> Self {
        let mut owned = Vec::new();
        let (route, path) = match table.pair_index(from, content) {
            Some(idx) => (table.route_at(idx), table.path(idx)),
            None => (
                resolve_route(graph, joint, from, content, None, &mut owned),
                owned.as_slice(),
            ),
        };
        if let Some(p) = path.iter().position(|&v| v == to) {
            let hops: f64 = path[..=p]
                .windows(2)
                .map(|w| graph.link_delay(w[0], w[1]).map_or(0.0, |d| d.as_f64()))
                .sum();
            return Self {
                latency: hops + graph.cloud_delay.as_f64(),
                marginal: None,
            };
        }
        Self {
            latency: table.latency_of(graph, &route).as_f64(),
            marginal: route.server.map(|k| {
                let spec = graph.node(k);
                let (load, cap) = (table.loads()[k].as_f64(), spec.compute_capacity.as_f64());
                (
                    load * spec.proc_delay.as_f64() / cap,
                    2.0 * (load / cap - rho_max.as_f64()).max(0.0) / cap,
                )
            }),
        }
    }
}

impl LocalModel {
    pub fn new<S: Scalar>(
        view: &LocalView<'_, S>,
        params: &ObjectiveParams<S>,
        total_demand: f64,
        inflow: &[Inflow],
        advertised: impl Fn(NodeId, ContentId) -> Advert,
    ) -> Self {
        let node = view.node();
        let graph = view.graph();
        let current = view.own_action().cloned().unwrap_or_else(NodeAction::empty);
        let row: Vec<f64> = view.own_demand().iter().map(|r| r.as_f64()).collect();
        let contents = row.len();
        let hop = |id: NodeId, delay: f64, cache: Vec<bool>, reach: Vec<Option<Advert>>| {
            let spec = graph.node(id);
            Hop {
                id,
                delay,
                proc: spec.proc_delay.as_f64(),
                capacity: spec.compute_capacity.as_f64(),
                base: view.load(id).as_f64(),
                cache,
                reach,
            }
        };
        let mut neighbors = Vec::new();
        for (j, d) in graph.neighbors(node) {
            let Some(a) = view.neighbor_action(j) else {
                continue;
            };
            let mut cache = vec![false; contents];
            for &c in &a.cache {
                if c < contents {
                    cache[c] = true;
                }
            }
            let reach = (0..contents)
                .map(|c| (!cache[c]).then(|| advertised(j, c)))
                .collect();
            neighbors.push(hop(j, d.as_f64(), cache, reach));
        }
        let mut requests: Vec<_> = row
            .iter()
            .enumerate()
            .filter(|e| *e.1 > 0.0)
            .map(|(c, &r)| (c, r, Vec::new()))
            .collect();
        for f in inflow.iter().filter(|f| f.content < contents) {
            let crossed = f
                .via
                .iter()
                .filter_map(|v| neighbors.iter().position(|h: &Hop| h.id == *v))
                .collect();
            requests.push((f.content, f.rate, crossed));
        }
        let w = &params.weights;
        let mut model = Self {
            cloud: graph.cloud_delay.as_f64(),
            rho: params.rho_max.as_f64(),
            weights: [w.alpha.as_f64(), w.beta.as_f64(), w.gamma.as_f64()],
            c_store: params.c_store.as_f64(),
            c_serve: params.c_serve.as_f64(),
            total_demand,
            own: hop(node, 0.0, Vec::new(), Vec::new()),
            neighbors,
            requests,
            current,
            base: 0.0,
        };
        // strip the modeled traffic from the observed loads
        let current = model.current.clone();
        let (own_load, fwd, fwd_load) = model.loads(&current);
        model.own.base = (model.own.base - own_load).max(0.0);
        if let Some(f) = fwd {
            model.neighbors[f].base = (model.neighbors[f].base - fwd_load).max(0.0);
        }
        model.base = model.share(&current, model.touched(&current));
        model
    }

    fn forward_index(&self, a: &NodeAction) -> Option<usize> {
        match a.forward {
            Forward::Node(j) => self.neighbors.iter().position(|h| h.id == j),
            Forward::Cloud => None,
        }
    }

    fn touched(&self, a: &NodeAction) -> [Option<usize>; 2] {
        [self.forward_index(&self.current), self.forward_index(a)]
    }

    /// Modeled load at the agent and at its forwarding target under `a`.
    fn loads(&self, a: &NodeAction) -> (f64, Option<usize>, f64) {
        let fwd = self.forward_index(a);
        let (mut own, mut far) = (0.0, 0.0);
        for (c, r, crossed) in &self.requests {
            let (c, r) = (*c, *r);
            if a.cache.contains(&c) {
                own += r;
            } else if let Some(f) = fwd {
                if !crossed.contains(&f) && self.neighbors[f].cache[c] {
                    far += r;
                }
            }
        }
        (own, fwd, far)
    }

    fn share(&self, a: &NodeAction, touched: [Option<usize>; 2]) -> f64 {
        let [l, c, r] = self.parts(a, touched);
        self.weights[0] * l + self.weights[1] * c + self.weights[2] * r
    }

    /// Modeled (latency, cost, risk) change if the agent switches to `candidate`.
    pub fn components(&self, candidate: &NodeAction) -> [f64; 3] {
        let touched = self.touched(candidate);
        let (new, old) = (
            self.parts(candidate, touched),
            self.parts(&self.current, touched),
        );
        [new[0] - old[0], new[1] - old[1], new[2] - old[2]]
    }

    fn parts(&self, a: &NodeAction, touched: [Option<usize>; 2]) -> [f64; 3] {
        let (own_load, fwd, fwd_load) = self.loads(a);
        let load_at =
            |k: usize| self.neighbors[k].base + if Some(k) == fwd { fwd_load } else { 0.0 };
        let own_total = self.own.base + own_load;
        let loaded = |h: &Hop, load: f64| h.proc * (1.0 + load / h.capacity);
        let own_delay = loaded(&self.own, own_total);
        let fwd_delay = fwd.map(|f| {
            (
                self.neighbors[f].delay,
                loaded(&self.neighbors[f], load_at(f)),
            )
        });
        let mut latency = 0.0;
        let mut served = 0.0;
        let mut far_risk = 0.0;
        for (c, r, crossed) in &self.requests {
            let (c, r) = (*c, *r);
            let lat = if a.cache.contains(&c) {
                served += r;
                own_delay
            } else {
                match (fwd, fwd_delay) {
                    (Some(f), Some((d, proc))) if !crossed.contains(&f) => {
                        let h = &self.neighbors[f];
                        if h.cache[c] {
                            served += r;
                            d + proc
                        } else if let Some(adv) = h.reach[c] {
                            if let Some((ext_latency, ext_risk)) = adv.marginal {
                                served += r;
                                latency += r * ext_latency;
                                far_risk += r * ext_risk;
                            }
                            d + adv.latency
                        } else {
                            d + self.cloud
                        }
                    }
                    _ => self.cloud,
                }
            };
            latency += r * lat;
        }
        // unmodeled traffic served at touched nodes sees their load change
        latency += self.own.base * own_delay;
        let over = |load: f64, cap: f64| (load / cap - self.rho).max(0.0).powi(2);
        let mut risk = over(own_total, self.own.capacity) + far_risk;
        let mut seen = [usize::MAX; 2];
        for (i, k) in touched.into_iter().flatten().enumerate() {
            if !seen.contains(&k) {
                let h = &self.neighbors[k];
                latency += h.base * loaded(h, load_at(k));
                risk += over(load_at(k), h.capacity);
                seen[i] = k;
            }
        }
        let cost = self.c_store * a.cache.len() as f64 + self.c_serve * served;
        let l = if self.total_demand > 0.0 {
            latency / self.total_demand
        } else {
            0.0
        };
        [l, cost, risk]
    }

    /// Modeled change of the share if the agent switches to `candidate`.
    pub fn delta(&self, candidate: &NodeAction) -> f64 {
        if *candidate == self.current {
            return 0.0;
        }
        let touched = self.touched(candidate);
        self.share(candidate, touched)
            - if touched[0] == touched[1] {
                self.base
            } else {
                self.share(&self.current, touched)
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: NodeAction,
    /// Utility of the chosen action (negative means improvement).
    pub value: f64,
    pub switched: bool,
    pub explored: bool,
}

/// Argmin over `candidates` (first entry must be the current action).
/// Ties keep the earliest candidate; the move is taken only if it improves
/// by more than `epsilon_switch`.
pub fn best_response<F>(candidates: &[NodeAction], mut utility: F, epsilon_switch: f64) -> Decision
where
    F: FnMut(&NodeAction) -> f64,
{
    let mut best = 0;
    let mut best_value = 0.0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let v = utility(c);
        if v < best_value {
            best = i;
            best_value = v;
        }
    }
    if best_value < -epsilon_switch {
        Decision {
            action: candidates[best].clone(),
            value: best_value,
            switched: true,
            explored: false,
        }
    } else {
        Decision {
            action: candidates[0].clone(),
            value: 0.0,
            switched: false,
            explored: false,
        }
    }
}

/// Persistent per-agent state kept by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogAgent {
    pub id: NodeId,
    pub memory: LocalMemory,
    /// Smoothed per-content arrival rate observed at this node.
    pub demand_estimate: Vec<f64>,
    pub observed_slots: u64,
    /// Counts of the current drift window and the estimate it is tested against.
    #[serde(default)]
    window: VecDeque<Vec<u32>>,
    #[serde(default)]
    anchors: VecDeque<Vec<f64>>,
}

impl FogAgent {
    pub fn new(id: NodeId, contents: usize, memory: usize) -> Self {
        Self {
            id,
            memory: LocalMemory::new(memory),
            demand_estimate: vec![0.0; contents],
            observed_slots: 0,
            window: VecDeque::new(),
            anchors: VecDeque::new(),
        }
    }

    /// Folds one slot of observed arrival counts into the estimate: a
    /// running mean until `1 / demand_smoothing` slots, exponential
    /// smoothing after. When the counts of the last `drift_window` slots are
    /// implausible under the estimate held before them (Poisson chi-square
    /// above `drift_threshold` times the catalog size), the running mean
    /// restarts from the current slot. Returns whether it restarted.
    pub fn observe_arrivals(&mut self, counts: &[u32], config: &AgentConfig) -> bool {
        let w = config.drift_window;
        if w > 0 {
            self.anchors.push_back(self.demand_estimate.clone());
            self.window.push_back(counts.to_vec());
            if self.window.len() > w {
                self.window.pop_front();
                self.anchors.pop_front();
            }
        }
        self.observed_slots += 1;
        let step = config
            .demand_smoothing
            .max(1.0 / self.observed_slots as f64);
        for (est, &n) in self.demand_estimate.iter_mut().zip(counts) {
            *est += step * (n as f64 - *est);
        }
        if w == 0 || self.window.len() < w || self.observed_slots < 2 * w as u64 {
            return false;
        }
        let anchor = &self.anchors[0];
        let mut sums = vec![0.0; anchor.len()];
        for slot in &self.window {
            for (s, &n) in sums.iter_mut().zip(slot) {
                *s += n as f64;
            }
        }
        let stat: f64 = sums
            .iter()
            .zip(anchor)
            .map(|(&s, &e)| {
                let expect = e * w as f64;
                (s - expect).powi(2) / (expect + 1.0)
            })
            .sum();
        if stat <= config.drift_threshold * anchor.len() as f64 {
            return false;
        }
        for (est, &n) in self.demand_estimate.iter_mut().zip(counts) {
            *est = n as f64;
        }
        self.observed_slots = 1;
        self.window.clear();
        self.anchors.clear();
        true
    }

    /// Candidate contents for add/swap moves.
    pub fn candidate_contents(&self, limit: Option<usize>) -> Vec<ContentId> {
        let order = popularity_order(&self.demand_estimate);
        match limit {
            Some(k) => order.into_iter().take(k).collect(),
            None => order,
        }
    }

    /// Memory-based decision with epsilon exploration. With `local` the
    /// informed utility is used, otherwise the estimated one.
    #[allow(clippy::too_many_arguments)]
    pub fn decide_estimated<R: Rng>(
        &self,
        candidates: &[NodeAction],
        classifier: &Classifier,
        shared: &SharedView<'_>,
        context: ContextKey,
        config: &AgentConfig,
        pooled: bool,
        local: Option<&dyn Fn(&NodeAction) -> f64>,
        rng: &mut R,
    ) -> Decision {
        let current = &candidates[0];
        let agent = (!pooled).then_some(self.id);
        let value_of = |a: &NodeAction| {
            let class = classifier.classify(current, a);
            match local {
                Some(f) => utility_informed(
                    f(a),
                    shared,
                    &self.memory,
                    agent,
                    context,
                    class,
                    config.prior,
                ),
                None => {
                    utility_estimated(shared, &self.memory, agent, context, class, config.prior)
                }
            }
        };
        if candidates.len() > 1 && rng.gen::<f64>() < config.epsilon_explore {
            // evaluated first, optimistically: memory is ignored for this one
            let pick = candidates[1..].choose(rng).expect("non-empty");
            let value = local.map_or(0.0, |f| f(pick)) + config.prior;
            if value < -config.epsilon_switch {
                return Decision {
                    action: pick.clone(),
                    value,
                    switched: true,
                    explored: true,
                };
            }
        }
        best_response(candidates, value_of, config.epsilon_switch)
    }

    /// Appends an outcome to local and shared memory.
    pub fn record_outcome(
        &mut self,
        shared: &mut SharedMemory,
        context: ContextKey,
        action: ActionClass,
        delta: f64,
        predicted: f64,
        slot: u64,
    ) {
        self.memory.push(context, action, delta, predicted);
        shared.append_episode(EpisodeRecord {
            agent: self.id,
            context,
            action,
            delta,
            predicted,
            slot,
        });
    }
}
