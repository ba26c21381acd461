//! Global objective `alpha*L + beta*C + gamma*R`, its per-node decomposition,
//! and the potential function used by the agent game.
//!
//! A request entering node `k` for content `c` is served at `k` if cached
//! there; otherwise it follows `forward` pointers hop by hop until a node
//! caching `c` is found. Forwarding to the cloud, to a dead or non-adjacent
//! node, or back into the chain (a cycle) ends at the cloud.
//!
//! Latency of a fog hit at server `s` is `hops + proc(s) * (1 + load(s)/cap(s))`
//! where `load(s)` is the expected rate served at `s`. A cloud hit costs
//! `hops + cloud_delay`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::topology::{FogGraph, NodeId};
use crate::workload::{ContentId, DemandMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("objective weights must be nonnegative and not all zero")]
    InvalidWeights,
    #[error("model constants must be nonnegative (rho_max > 0)")]
    InvalidConstants,
}

/// Miss-forwarding target of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Forward {
    Cloud,
    Node(NodeId),
}

/// One node's strategy: what it caches and where it sends misses.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeAction {
    pub cache: BTreeSet<ContentId>,
    pub forward: Forward,
}

impl NodeAction {
    pub fn new(cache: impl IntoIterator<Item = ContentId>, forward: Forward) -> Self {
        Self {
            cache: cache.into_iter().collect(),
            forward,
        }
    }

    pub fn empty() -> Self {
        Self::new([], Forward::Cloud)
    }

    /// Feasible for `node` in `graph` with a catalog of `contents` items.
    pub fn is_feasible<S: Scalar>(
        &self,
        graph: &FogGraph<S>,
        node: NodeId,
        contents: usize,
    ) -> bool {
        self.cache.len() <= graph.node(node).cache_capacity
            && self.cache.iter().all(|&c| c < contents)
            && match self.forward {
                Forward::Cloud => true,
                Forward::Node(j) => {
                    j != node && graph.is_alive(j) && graph.link_delay(node, j).is_some()
                }
            }
    }
}

/// Strategy profile indexed by node id; dead nodes hold `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    actions: Vec<Option<NodeAction>>,
}

impl JointAction {
    pub fn new(actions: Vec<Option<NodeAction>>) -> Self {
        Self { actions }
    }

    /// Every alive node caches nothing and forwards to the cloud.
    pub fn empty_for<S: Scalar>(graph: &FogGraph<S>) -> Self {
        Self {
            actions: (0..graph.len())
                .map(|i| graph.is_alive(i).then(NodeAction::empty))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, node: NodeId) -> Option<&NodeAction> {
        self.actions.get(node).and_then(Option::as_ref)
    }

    pub fn set(&mut self, node: NodeId, action: NodeAction) {
        self.actions[node] = Some(action);
    }

    pub fn clear(&mut self, node: NodeId) {
        self.actions[node] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &NodeAction)> {
        self.actions
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|a| (i, a)))
    }

    pub fn with(&self, node: NodeId, action: NodeAction) -> Self {
        let mut next = self.clone();
        next.set(node, action);
        next
    }

    /// Drops actions of dead nodes and redirects forwards that point at them.
    pub fn sanitize<S: Scalar>(&mut self, graph: &FogGraph<S>) {
        for i in 0..self.actions.len() {
            if !graph.is_alive(i) {
                self.actions[i] = None;
                continue;
            }
            if let Some(a) = self.actions[i].as_mut() {
                if let Forward::Node(j) = a.forward {
                    if !graph.is_alive(j) || graph.link_delay(i, j).is_none() {
                        a.forward = Forward::Cloud;
                    }
                }
            } else {
                self.actions[i] = Some(NodeAction::empty());
            }
        }
    }

    /// One entry per alive node and nothing else.
    pub fn covers_alive<S: Scalar>(&self, graph: &FogGraph<S>) -> bool {
        self.actions.len() == graph.len()
            && (0..graph.len()).all(|i| graph.is_alive(i) == self.actions[i].is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ObjectiveWeights<S> {
    pub alpha: S,
    pub beta: S,
    pub gamma: S,
}

impl<S: Scalar> ObjectiveWeights<S> {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha: S::lit(alpha),
            beta: S::lit(beta),
            gamma: S::lit(gamma),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(*w >= S::zero()) || !w.is_finite())
            || all.iter().all(|w| w.is_zero())
        {
            return Err(ObjectiveError::InvalidWeights);
        }
        Ok(())
    }

    pub fn scaled(&self, k: S) -> Self {
        Self {
            alpha: self.alpha * k,
            beta: self.beta * k,
            gamma: self.gamma * k,
        }
    }

    pub fn weight(&self, component: Component) -> S {
        match component {
            Component::Latency => self.alpha,
            Component::Cost => self.beta,
            Component::Risk => self.gamma,
        }
    }

    pub fn cast<T: Scalar>(&self) -> ObjectiveWeights<T> {
        ObjectiveWeights {
            alpha: T::lit(self.alpha.as_f64()),
            beta: T::lit(self.beta.as_f64()),
            gamma: T::lit(self.gamma.as_f64()),
        }
    }
}

/// Weights plus the cost and risk model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ObjectiveParams<S> {
    pub weights: ObjectiveWeights<S>,
    /// Cost per cached item.
    pub c_store: S,
    /// Cost per unit of served rate.
    pub c_serve: S,
    /// Utilization above which overload risk accrues.
    pub rho_max: S,
}

impl<S: Scalar> Default for ObjectiveParams<S> {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights::new(1.0, 1.0, 1.0),
            c_store: S::lit(0.1),
            c_serve: S::lit(0.01),
            rho_max: S::lit(0.8),
        }
    }
}

impl<S: Scalar> ObjectiveParams<S> {
    pub fn with_weights(weights: ObjectiveWeights<S>) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.weights.validate()?;
        if self.c_store < S::zero() || self.c_serve < S::zero() || !(self.rho_max > S::zero()) {
            return Err(ObjectiveError::InvalidConstants);
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ObjectiveParams<T> {
        ObjectiveParams {
            weights: self.weights.cast(),
            c_store: T::lit(self.c_store.as_f64()),
            c_serve: T::lit(self.c_serve.as_f64()),
            rho_max: T::lit(self.rho_max.as_f64()),
        }
    }

    pub fn risk(&self, load: S, capacity: S) -> S {
        let excess = load / capacity - self.rho_max;
        if excess > S::zero() {
            excess * excess
        } else {
            S::zero()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ObjectiveValue<S> {
    pub latency: S,
    pub cost: S,
    pub risk: S,
    pub scalar: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LocalContribution<S> {
    pub node: NodeId,
    pub latency: S,
    pub cost: S,
    pub risk: S,
}

impl<S: Scalar> LocalContribution<S> {
    pub fn weighted(&self, w: &ObjectiveWeights<S>) -> S {
        w.alpha * self.latency + w.beta * self.cost + w.gamma * self.risk
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<S> {
    pub value: ObjectiveValue<S>,
    pub contributions: Vec<LocalContribution<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Latency,
    Cost,
    Risk,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Latency, Component::Cost, Component::Risk];

    pub fn of<S: Copy>(self, value: &ObjectiveValue<S>) -> S {
        match self {
            Component::Latency => value.latency,
            Component::Cost => value.cost,
            Component::Risk => value.risk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SubObjective<S> {
    pub component: Component,
    pub weight: S,
}

/// Active sub-objectives (nonzero weight), in latency/cost/risk order.
pub fn decompose<S: Scalar>(weights: &ObjectiveWeights<S>) -> Vec<SubObjective<S>> {
    Component::ALL
        .into_iter()
        .map(|component| SubObjective {
            component,
            weight: weights.weight(component),
        })
        .filter(|s| s.weight > S::zero())
        .collect()
}

/// Weighted recomposition of sub-objectives against an evaluated value.
pub fn recompose<S: Scalar>(subs: &[SubObjective<S>], value: &ObjectiveValue<S>) -> S {
    subs.iter().map(|s| s.weight * s.component.of(value)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route<S> {
    /// Serving fog node, `None` for the cloud.
    pub server: Option<NodeId>,
    /// Summed link delay along the forwarding chain.
    pub hops: S,
}

/// Follows the forwarding chain of `(ingress, content)`. `override_action`
/// substitutes one node's action; `path` receives the visited nodes.
pub fn resolve_route<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    ingress: NodeId,
    content: ContentId,
    override_action: Option<(NodeId, &NodeAction)>,
    path: &mut Vec<NodeId>,
) -> Route<S> {
    path.clear();
    let action_of = |n: NodeId| -> Option<&NodeAction> {
        match override_action {
            Some((o, a)) if o == n => Some(a),
            _ => joint.get(n),
        }
    };
    let mut hops = S::zero();
    if !graph.is_alive(ingress) {
        return Route { server: None, hops };
    }
    let mut cur = ingress;
    loop {
        path.push(cur);
        let Some(action) = action_of(cur) else {
            return Route { server: None, hops };
        };
        if action.cache.contains(&content) {
            return Route {
                server: Some(cur),
                hops,
            };
        }
        let Forward::Node(next) = action.forward else {
            return Route { server: None, hops };
        };
        if !graph.is_alive(next) || path.contains(&next) {
            return Route { server: None, hops };
        }
        let Some(delay) = graph.link_delay(cur, next) else {
            return Route { server: None, hops };
        };
        hops = hops + delay;
        cur = next;
    }
}

/// Resolved routes and loads for every demanded (node, content) pair.
///
/// Full evaluation reads the table directly; unilateral deviations are
/// evaluated incrementally by re-resolving only chains that visit the
/// deviating node.
#[derive(Debug, Clone)]
pub struct RouteTable<S> {
    pairs: Vec<(NodeId, ContentId, S)>,
    routes: Vec<Route<S>>,
    path_start: Vec<usize>,
    path_nodes: Vec<NodeId>,
    through: Vec<Vec<u32>>,
    served: Vec<Vec<u32>>,
    load: Vec<S>,
    total_demand: S,
    contents: usize,
    /// Dense `(node, content)` to pair index, `u32::MAX` when absent.
    index: Vec<u32>,
}

impl<S: Scalar> RouteTable<S> {
    pub fn build(graph: &FogGraph<S>, joint: &JointAction, demand: &DemandMatrix<S>) -> Self {
        let n = graph.len();
        let mut table = Self {
            pairs: Vec::new(),
            routes: Vec::new(),
            path_start: vec![0],
            path_nodes: Vec::new(),
            through: vec![Vec::new(); n],
            served: vec![Vec::new(); n],
            load: vec![S::zero(); n],
            total_demand: S::zero(),
            contents: demand.contents(),
            index: vec![u32::MAX; n * demand.contents()],
        };
        let mut path = Vec::new();
        for k in 0..n.min(demand.nodes()) {
            if !graph.is_alive(k) {
                continue;
            }
            for c in 0..demand.contents() {
                let rate = demand.rate(k, c);
                if !(rate > S::zero()) {
                    continue;
                }
                let idx = table.pairs.len() as u32;
                let route = resolve_route(graph, joint, k, c, None, &mut path);
                table.pairs.push((k, c, rate));
                table.index[k * table.contents + c] = idx;
                table.routes.push(route);
                for &v in &path {
                    table.through[v].push(idx);
                }
                table.path_nodes.extend_from_slice(&path);
                table.path_start.push(table.path_nodes.len());
                if let Some(s) = route.server {
                    table.load[s] = table.load[s] + rate;
                    table.served[s].push(idx);
                }
                table.total_demand = table.total_demand + rate;
            }
        }
        table
    }

    pub fn load(&self, node: NodeId) -> S {
        self.load[node]
    }

    pub fn loads(&self) -> &[S] {
        &self.load
    }

    pub fn total_demand(&self) -> S {
        self.total_demand
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Nodes visited by the chain of pair `idx`.
    pub fn path(&self, idx: usize) -> &[NodeId] {
        &self.path_nodes[self.path_start[idx]..self.path_start[idx + 1]]
    }

    pub fn pair_index(&self, ingress: NodeId, content: ContentId) -> Option<usize> {
        if content >= self.contents {
            return None;
        }
        match self.index.get(ingress * self.contents + content) {
            Some(&i) if i != u32::MAX => Some(i as usize),
            _ => None,
        }
    }

    /// `(ingress, content, rate)` of pair `idx`.
    pub fn pair(&self, idx: usize) -> (NodeId, ContentId, S) {
        self.pairs[idx]
    }

    pub fn route_at(&self, idx: usize) -> Route<S> {
        self.routes[idx]
    }

    /// Indices of the pairs whose chain passes through `node`.
    pub fn indices_through(&self, node: NodeId) -> impl Iterator<Item = usize> + '_ {
        self.through[node].iter().map(|&p| p as usize)
    }

    /// Pairs whose chain passes through `node`.
    pub fn pairs_through(&self, node: NodeId) -> impl Iterator<Item = (NodeId, ContentId, S)> + '_ {
        self.through[node].iter().map(|&p| self.pairs[p as usize])
    }

    fn route_latency(graph: &FogGraph<S>, route: &Route<S>, load: S) -> S {
        match route.server {
            Some(s) => {
                let spec = graph.node(s);
                route.hops + spec.proc_delay * (S::one() + load / spec.compute_capacity)
            }
            None => route.hops + graph.cloud_delay,
        }
    }

    /// Latency of a request under the current loads; resolves pairs that
    /// carry no demand on the fly.
    pub fn request_latency(
        &self,
        graph: &FogGraph<S>,
        joint: &JointAction,
        ingress: NodeId,
        content: ContentId,
    ) -> S {
        self.latency_of(graph, &self.route(graph, joint, ingress, content))
    }

    pub fn route(
        &self,
        graph: &FogGraph<S>,
        joint: &JointAction,
        ingress: NodeId,
        content: ContentId,
    ) -> Route<S> {
        self.pair_index(ingress, content)
            .map(|idx| self.routes[idx])
            .unwrap_or_else(|| resolve_route(graph, joint, ingress, content, None, &mut Vec::new()))
    }

    /// Latency along `route` under the table's loads.
    pub fn latency_of(&self, graph: &FogGraph<S>, route: &Route<S>) -> S {
        let load = route.server.map_or(S::zero(), |s| self.load[s]);
        Self::route_latency(graph, route, load)
    }

    pub fn evaluate(
        &self,
        graph: &FogGraph<S>,
        joint: &JointAction,
        params: &ObjectiveParams<S>,
    ) -> Evaluation<S> {
        let n = graph.len();
        let mut lat_i = vec![S::zero(); n];
        let mut weighted_latency = S::zero();
        for (idx, &(k, _, rate)) in self.pairs.iter().enumerate() {
            let s = self.routes[idx].server.map_or(S::zero(), |s| self.load[s]);
            let term = rate * Self::route_latency(graph, &self.routes[idx], s);
            weighted_latency = weighted_latency + term;
            lat_i[k] = lat_i[k] + term;
        }
        let (latency, norm) = if self.total_demand > S::zero() {
            (weighted_latency / self.total_demand, self.total_demand)
        } else {
            (S::zero(), S::one())
        };

        let mut contributions = Vec::with_capacity(n);
        let mut cost = S::zero();
        let mut risk = S::zero();
        for i in graph.alive_nodes() {
            let spec = graph.node(i);
            let stored = joint.get(i).map_or(0, |a| a.cache.len());
            let c_i = params.c_store * S::lit(stored as f64) + params.c_serve * self.load[i];
            let r_i = params.risk(self.load[i], spec.compute_capacity);
            cost = cost + c_i;
            risk = risk + r_i;
            contributions.push(LocalContribution {
                node: i,
                latency: lat_i[i] / norm,
                cost: c_i,
                risk: r_i,
            });
        }
        let w = &params.weights;
        Evaluation {
            value: ObjectiveValue {
                latency,
                cost,
                risk,
                scalar: w.alpha * latency + w.beta * cost + w.gamma * risk,
            },
            contributions,
        }
    }

    /// Change in the potential when `node` alone switches to `candidate`,
    /// computed from the terms that deviation touches.
    pub fn deviation_delta(
        &self,
        graph: &FogGraph<S>,
        joint: &JointAction,
        params: &ObjectiveParams<S>,
        node: NodeId,
        candidate: &NodeAction,
    ) -> S {
        let Some(current) = joint.get(node) else {
            return S::zero();
        };
        if current == candidate {
            return S::zero();
        }
        let mut path = Vec::new();
        let affected = &self.through[node];
        let mut new_routes = Vec::with_capacity(affected.len());
        let mut touched: Vec<NodeId> = Vec::new();
        let mut load_delta: Vec<(NodeId, S)> = Vec::new();
        let mut bump = |touched: &mut Vec<NodeId>, s: NodeId, d: S| {
            if let Some(e) = load_delta.iter_mut().find(|e| e.0 == s) {
                e.1 = e.1 + d;
            } else {
                load_delta.push((s, d));
                touched.push(s);
            }
        };
        for &p in affected {
            let (k, c, rate) = self.pairs[p as usize];
            let old = self.routes[p as usize];
            let new = resolve_route(graph, joint, k, c, Some((node, candidate)), &mut path);
            if old.server != new.server {
                if let Some(s) = old.server {
                    bump(&mut touched, s, -rate);
                }
                if let Some(s) = new.server {
                    bump(&mut touched, s, rate);
                }
            }
            new_routes.push(new);
        }
        let new_load = |s: NodeId| -> S {
            let d = load_delta
                .iter()
                .find(|e| e.0 == s)
                .map_or(S::zero(), |e| e.1);
            self.load[s] + d
        };
        let old_load = |s: NodeId| self.load[s];

        let mut d_latency = S::zero();
        for (i, &p) in affected.iter().enumerate() {
            let rate = self.pairs[p as usize].2;
            let old = &self.routes[p as usize];
            let new = &new_routes[i];
            let before = Self::route_latency(graph, old, old.server.map_or(S::zero(), old_load));
            let after = Self::route_latency(graph, new, new.server.map_or(S::zero(), new_load));
            d_latency = d_latency + rate * (after - before);
        }
        let mut d_cost = params.c_store
            * (S::lit(candidate.cache.len() as f64) - S::lit(current.cache.len() as f64));
        let mut d_risk = S::zero();
        for &s in &touched {
            let spec = graph.node(s);
            let dl = new_load(s) - old_load(s);
            // unaffected pairs still served at s see only the load change
            let mut carried = S::zero();
            for &p in &self.served[s] {
                if affected.binary_search(&p).is_err() {
                    carried = carried + self.pairs[p as usize].2;
                }
            }
            d_latency = d_latency + carried * spec.proc_delay * dl / spec.compute_capacity;
            d_cost = d_cost + params.c_serve * dl;
            d_risk = d_risk + params.risk(new_load(s), spec.compute_capacity)
                - params.risk(old_load(s), spec.compute_capacity);
        }
        let d_latency = if self.total_demand > S::zero() {
            d_latency / self.total_demand
        } else {
            S::zero()
        };
        let w = &params.weights;
        w.alpha * d_latency + w.beta * d_cost + w.gamma * d_risk
    }
}

/// Full evaluation: global value plus per-node additive shares.
pub fn evaluate<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    demand: &DemandMatrix<S>,
    params: &ObjectiveParams<S>,
) -> Evaluation<S> {
    RouteTable::build(graph, joint, demand).evaluate(graph, joint, params)
}

/// The potential of the agent game: the global objective scalar.
pub fn potential<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    demand: &DemandMatrix<S>,
    params: &ObjectiveParams<S>,
) -> S {
    evaluate(graph, joint, demand, params).value.scalar
}

pub fn request_latency<S: Scalar>(
    graph: &FogGraph<S>,
    joint: &JointAction,
    demand: &DemandMatrix<S>,
    ingress: NodeId,
    content: ContentId,
) -> S {
    RouteTable::build(graph, joint, demand).request_latency(graph, joint, ingress, content)
}
