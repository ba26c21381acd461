//! Fog mesh: capacity-annotated nodes joined by delay-annotated links.
//!
//! Graphs are bounded-degree random meshes built from a random spanning tree
//! plus extra random edges. Failed nodes stay in the graph as tombstones so
//! node ids remain stable across failure experiments.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("mesh needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("max_degree must be at least 2, got {0}")]
    DegreeTooSmall(usize),
    #[error("no connected mesh found after {0} attempts")]
    GenerationFailed(usize),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is already dead")]
    AlreadyDead(NodeId),
    #[error("invalid range for {name}: [{lo}, {hi}]")]
    InvalidRange {
        name: &'static str,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct NodeSpec<S> {
    pub id: NodeId,
    /// Requests per time unit.
    pub compute_capacity: S,
    /// Content slots.
    pub cache_capacity: usize,
    /// Base processing delay in time units.
    pub proc_delay: S,
}

/// Undirected link; endpoints are stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Link<S> {
    pub a: NodeId,
    pub b: NodeId,
    pub delay: S,
}

/// Uniform sampling ranges for node and link heterogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeRanges {
    pub compute_capacity: [f64; 2],
    pub cache_capacity: [usize; 2],
    pub proc_delay: [f64; 2],
    pub link_delay: [f64; 2],
}

impl Default for NodeRanges {
    fn default() -> Self {
        Self {
            compute_capacity: [5.0, 20.0],
            cache_capacity: [2, 5],
            proc_delay: [0.5, 2.0],
            link_delay: [1.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshParams {
    pub nodes: usize,
    pub max_degree: usize,
    /// Target edge count as a multiple of the node count.
    pub edge_factor: f64,
    pub ranges: NodeRanges,
    pub cloud_delay: f64,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            nodes: 20,
            max_degree: 4,
            edge_factor: 1.5,
            ranges: NodeRanges::default(),
            cloud_delay: 50.0,
        }
    }
}

impl MeshParams {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.nodes < 2 {
            return Err(TopologyError::TooFewNodes(self.nodes));
        }
        if self.max_degree < 2 {
            return Err(TopologyError::DegreeTooSmall(self.max_degree));
        }
        let r = &self.ranges;
        let check = |name, lo: f64, hi: f64, strict_positive: bool| {
            let bad = !(lo.is_finite() && hi.is_finite())
                || lo > hi
                || (strict_positive && lo <= 0.0)
                || lo < 0.0;
            if bad {
                Err(TopologyError::InvalidRange { name, lo, hi })
            } else {
                Ok(())
            }
        };
        check(
            "compute_capacity",
            r.compute_capacity[0],
            r.compute_capacity[1],
            true,
        )?;
        check("proc_delay", r.proc_delay[0], r.proc_delay[1], true)?;
        check("link_delay", r.link_delay[0], r.link_delay[1], true)?;
        check("cloud_delay", self.cloud_delay, self.cloud_delay, true)?;
        check(
            "cache_capacity",
            r.cache_capacity[0] as f64,
            r.cache_capacity[1] as f64,
            false,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FogGraph<S> {
    pub nodes: Vec<NodeSpec<S>>,
    pub links: Vec<Link<S>>,
    pub cloud_delay: S,
    pub alive: Vec<bool>,
    pub max_degree: usize,
    pub params: MeshParams,
    pub seed: u64,
    #[serde(skip)]
    adjacency: Vec<Vec<(NodeId, S)>>,
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Builds a connected mesh with every degree at most `max_degree`.
pub fn generate_mesh<S: Scalar>(
    params: &MeshParams,
    seed: u64,
) -> Result<FogGraph<S>, TopologyError> {
    params.validate()?;
    let n = params.nodes;
    let max_degree = params.max_degree;
    let mut rng = stream_rng(seed, Stream::Topology);

    let nodes: Vec<NodeSpec<S>> = (0..n)
        .map(|id| NodeSpec {
            id,
            compute_capacity: S::lit(uniform(&mut rng, params.ranges.compute_capacity)),
            cache_capacity: rng
                .gen_range(params.ranges.cache_capacity[0]..=params.ranges.cache_capacity[1]),
            proc_delay: S::lit(uniform(&mut rng, params.ranges.proc_delay)),
        })
        .collect();

    let mut degree = vec![0usize; n];
    let mut linked = vec![vec![false; n]; n];
    let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();

    // Random spanning tree: attach each node in a shuffled order to an
    // already placed node that still has degree slack.
    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(&mut rng);
    for k in 1..n {
        let v = order[k];
        let open: Vec<NodeId> = order[..k]
            .iter()
            .copied()
            .filter(|&u| degree[u] < max_degree)
            .collect();
        let Some(&u) = open.choose(&mut rng) else {
            return Err(TopologyError::GenerationFailed(1));
        };
        degree[u] += 1;
        degree[v] += 1;
        linked[u][v] = true;
        linked[v][u] = true;
        pairs.push((u.min(v), u.max(v)));
    }

    let target = ((params.edge_factor * n as f64).round() as usize).max(n - 1);
    let mut candidates: Vec<(NodeId, NodeId)> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .filter(|&(a, b)| !linked[a][b])
        .collect();
    candidates.shuffle(&mut rng);
    for (a, b) in candidates {
        if pairs.len() >= target {
            break;
        }
        if degree[a] < max_degree && degree[b] < max_degree {
            degree[a] += 1;
            degree[b] += 1;
            linked[a][b] = true;
            linked[b][a] = true;
            pairs.push((a, b));
        }
    }
    pairs.sort_unstable();

    let links = pairs
        .into_iter()
        .map(|(a, b)| Link {
            a,
            b,
            delay: S::lit(uniform(&mut rng, params.ranges.link_delay)),
        })
        .collect();

    let graph = FogGraph::from_parts(
        nodes,
        links,
        S::lit(params.cloud_delay),
        max_degree,
        params.clone(),
        seed,
    );
    if !graph.is_connected() {
        return Err(TopologyError::GenerationFailed(1));
    }
    Ok(graph)
}

#[derive(PartialEq)]
struct Frontier<S>(S, NodeId);

impl<S: Scalar> Eq for Frontier<S> {}

impl<S: Scalar> PartialOrd for Frontier<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<S: Scalar> Ord for Frontier<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap
        other
            .0
            .partial_cmp(&self.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl<S: Scalar> FogGraph<S> {
    /// Assembles a graph from explicit parts. All nodes start alive.
    pub fn from_parts(
        nodes: Vec<NodeSpec<S>>,
        links: Vec<Link<S>>,
        cloud_delay: S,
        max_degree: usize,
        params: MeshParams,
        seed: u64,
    ) -> Self {
        let n = nodes.len();
        let links = links
            .into_iter()
            .map(|l| Link {
                a: l.a.min(l.b),
                b: l.a.max(l.b),
                delay: l.delay,
            })
            .collect();
        let mut g = Self {
            nodes,
            links,
            cloud_delay,
            alive: vec![true; n],
            max_degree,
            params,
            seed,
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        g
    }

    /// Hand-built graph helper: `links` are `(a, b, delay)` triples.
    pub fn with_links(
        nodes: Vec<NodeSpec<S>>,
        links: &[(NodeId, NodeId, f64)],
        cloud_delay: f64,
    ) -> Self {
        let max_degree = nodes.len().max(2);
        let links = links
            .iter()
            .map(|&(a, b, d)| Link {
                a,
                b,
                delay: S::lit(d),
            })
            .collect();
        Self::from_parts(
            nodes,
            links,
            S::lit(cloud_delay),
            max_degree,
            MeshParams::default(),
            0,
        )
    }

    /// Restores derived indices after deserialization.
    pub fn rebuild_adjacency(&mut self) {
        let mut adjacency = vec![Vec::new(); self.nodes.len()];
        for l in &self.links {
            adjacency[l.a].push((l.b, l.delay));
            adjacency[l.b].push((l.a, l.delay));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(v, _)| v);
        }
        self.adjacency = adjacency;
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut g: Self = serde_json::from_str(text)?;
        g.rebuild_adjacency();
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec<S> {
        &self.nodes[id]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id < self.nodes.len()
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.alive.get(id).copied().unwrap_or(false)
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.alive[i])
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// All neighbors regardless of liveness.
    pub fn all_neighbors(&self, id: NodeId) -> &[(NodeId, S)] {
        &self.adjacency[id]
    }

    /// Alive neighbors of `id` with link delays, in id order.
    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = (NodeId, S)> + '_ {
        self.adjacency[id]
            .iter()
            .copied()
            .filter(move |&(v, _)| self.alive[v])
    }

    pub fn link_delay(&self, a: NodeId, b: NodeId) -> Option<S> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(v, _)| v == b)
            .map(|&(_, d)| d)
    }

    /// Degree counting only alive endpoints.
    pub fn alive_degree(&self, id: NodeId) -> usize {
        self.neighbors(id).count()
    }

    /// True iff every alive node reaches every other over alive nodes.
    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Connected components over alive nodes, each sorted, ordered by smallest id.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for start in self.alive_nodes() {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for (v, _) in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Shortest alive-node path delay; `S::infinity()` when unreachable.
    pub fn path_delay(&self, src: NodeId, dst: NodeId) -> Result<S, TopologyError> {
        if !self.contains(src) {
            return Err(TopologyError::UnknownNode(src));
        }
        if !self.contains(dst) {
            return Err(TopologyError::UnknownNode(dst));
        }
        Ok(self.distances_from(src)[dst])
    }

    /// Dijkstra from `src` over alive nodes.
    pub fn distances_from(&self, src: NodeId) -> Vec<S> {
        let mut dist = vec![S::infinity(); self.nodes.len()];
        if !self.is_alive(src) {
            return dist;
        }
        dist[src] = S::zero();
        let mut heap = BinaryHeap::from([Frontier(S::zero(), src)]);
        while let Some(Frontier(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Frontier(nd, v));
                }
            }
        }
        dist
    }

    pub fn all_pairs_delays(&self) -> Vec<Vec<S>> {
        (0..self.nodes.len())
            .map(|s| self.distances_from(s))
            .collect()
    }

    /// Marks a node dead. Its links become unusable; other records are untouched.
    pub fn fail_node(&mut self, id: NodeId) -> Result<(), TopologyError> {
        match self.alive.get_mut(id) {
            None => Err(TopologyError::UnknownNode(id)),
            Some(false) => Err(TopologyError::AlreadyDead(id)),
            Some(flag) => {
                *flag = false;
                Ok(())
            }
        }
    }

    /// True if removing `id` keeps the remaining alive nodes connected.
    pub fn removal_keeps_connectivity(&self, id: NodeId) -> bool {
        if !self.is_alive(id) {
            return self.is_connected();
        }
        let mut probe = self.clone();
        probe.alive[id] = false;
        probe.is_connected()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: NodeId) -> NodeSpec<f64> {
        NodeSpec {
            id,
            compute_capacity: 10.0,
            cache_capacity: 2,
            proc_delay: 1.0,
        }
    }

    fn params(n: usize, max_degree: usize) -> MeshParams {
        MeshParams {
            nodes: n,
            max_degree,
            ..MeshParams::default()
        }
    }

    fn check_invariants(g: &FogGraph<f64>, max_degree: usize) {
        for i in 0..g.len() {
            assert!(g.alive_degree(i) <= max_degree);
            for &(j, d) in g.all_neighbors(i) {
                assert_ne!(i, j);
                assert_eq!(g.link_delay(j, i), Some(d));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &g.links {
            assert!(l.a < l.b);
            assert!(seen.insert((l.a, l.b)), "duplicate link");
            assert!(l.delay > 0.0);
        }
        for n in &g.nodes {
            assert!(n.compute_capacity > 0.0 && n.proc_delay > 0.0);
        }
        assert!(g.is_connected());
    }

    #[test]
    fn ten_node_mesh_is_connected_and_bounded() {
        let g: FogGraph<f64> = generate_mesh(&params(10, 4), 7).unwrap();
        assert_eq!(g.len(), 10);
        check_invariants(&g, 4);
    }

    #[test]
    fn two_nodes_get_one_link() {
        let g: FogGraph<f64> = generate_mesh(&params(2, 2), 1).unwrap();
        assert_eq!(g.links.len(), 1);
        assert_eq!((g.links[0].a, g.links[0].b), (0, 1));
    }

    #[test]
    fn degree_two_mesh_is_path_or_cycle() {
        let g: FogGraph<f64> = generate_mesh(&params(5, 2), 3).unwrap();
        check_invariants(&g, 2);
        let degrees: Vec<usize> = (0..5).map(|i| g.alive_degree(i)).collect();
        let ones = degrees.iter().filter(|&&d| d == 1).count();
        let twos = degrees.iter().filter(|&&d| d == 2).count();
        // path: two endpoints of degree 1; cycle: all degree 2
        assert!(
            (ones == 2 && twos == 3 && g.links.len() == 4) || (twos == 5 && g.links.len() == 5)
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            generate_mesh::<f64>(&params(1, 4), 0).unwrap_err(),
            TopologyError::TooFewNodes(1)
        );
        assert_eq!(
            generate_mesh::<f64>(&params(5, 1), 0).unwrap_err(),
            TopologyError::DegreeTooSmall(1)
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a: FogGraph<f64> = generate_mesh(&params(30, 4), 11).unwrap();
        let b: FogGraph<f64> = generate_mesh(&params(30, 4), 11).unwrap();
        let c: FogGraph<f64> = generate_mesh(&params(30, 4), 12).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn json_round_trip_restores_adjacency() {
        let g: FogGraph<f64> = generate_mesh(&params(12, 3), 5).unwrap();
        let back = FogGraph::<f64>::from_json(&g.to_json()).unwrap();
        assert_eq!(back.all_neighbors(0), g.all_neighbors(0));
        assert_eq!(back, g);
    }

    #[test]
    fn removing_cut_vertex_disconnects() {
        // path 0 - 1 - 2
        let mut g = FogGraph::with_links(
            vec![spec(0), spec(1), spec(2)],
            &[(0, 1, 1.0), (1, 2, 1.0)],
            50.0,
        );
        assert!(g.is_connected());
        g.fail_node(1).unwrap();
        assert!(!g.is_connected());
        assert_eq!(g.components(), vec![vec![0], vec![2]]);
    }

    #[test]
    fn single_alive_node_is_connected() {
        let mut g: FogGraph<f64> = generate_mesh(&params(6, 3), 2).unwrap();
        for id in 1..6 {
            g.fail_node(id).unwrap();
        }
        assert_eq!(g.alive_count(), 1);
        assert!(g.is_connected());
    }

    #[test]
    fn path_delay_basics() {
        let mut g = FogGraph::with_links(
            vec![spec(0), spec(1), spec(2)],
            &[(0, 1, 2.5), (1, 2, 1.0)],
            50.0,
        );
        assert_eq!(g.path_delay(0, 0).unwrap(), 0.0);
        assert_eq!(g.path_delay(0, 1).unwrap(), 2.5);
        assert_eq!(g.path_delay(0, 2).unwrap(), 3.5);
        assert_eq!(g.path_delay(0, 9), Err(TopologyError::UnknownNode(9)));
        g.fail_node(1).unwrap();
        assert!(g.path_delay(0, 2).unwrap().is_infinite());
    }

    /// Brute force over all simple paths.
    fn brute_force_delay(g: &FogGraph<f64>, src: NodeId, dst: NodeId) -> f64 {
        fn dfs(
            g: &FogGraph<f64>,
            u: NodeId,
            dst: NodeId,
            seen: &mut Vec<bool>,
            acc: f64,
            best: &mut f64,
        ) {
            if u == dst {
                *best = best.min(acc);
                return;
            }
            for (v, d) in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    dfs(g, v, dst, seen, acc + d, best);
                    seen[v] = false;
                }
            }
        }
        let mut seen = vec![false; g.len()];
        seen[src] = true;
        let mut best = f64::INFINITY;
        dfs(g, src, dst, &mut seen, 0.0, &mut best);
        best
    }

    #[test]
    fn four_cycle_matches_enumeration() {
        let g = FogGraph::with_links(
            (0..4).map(spec).collect(),
            &[(0, 1, 1.0), (1, 2, 4.0), (2, 3, 1.5), (3, 0, 2.0)],
            50.0,
        );
        // 0 -> 2: via 1 costs 5.0, via 3 costs 3.5
        assert_eq!(brute_force_delay(&g, 0, 2), 3.5);
        for s in 0..4 {
            for t in 0..4 {
                assert_eq!(g.path_delay(s, t).unwrap(), brute_force_delay(&g, s, t));
            }
        }
    }

    #[test]
    fn failing_a_leaf_keeps_rest_connected() {
        let mut g: FogGraph<f64> = generate_mesh(&params(10, 4), 7).unwrap();
        let leaf = (0..10).min_by_key(|&i| (g.alive_degree(i), i)).unwrap();
        let before: Vec<_> = g.nodes.clone();
        if g.removal_keeps_connectivity(leaf) {
            g.fail_node(leaf).unwrap();
            assert_eq!(g.alive_count(), 9);
            assert!(g.is_connected());
        }
        assert_eq!(g.nodes, before);
        assert_eq!(g.fail_node(leaf).is_err(), !g.is_alive(leaf));
    }

    #[test]
    fn fail_node_errors() {
        let mut g: FogGraph<f64> = generate_mesh(&params(4, 2), 1).unwrap();
        assert_eq!(g.fail_node(10), Err(TopologyError::UnknownNode(10)));
        g.fail_node(0).unwrap();
        assert_eq!(g.fail_node(0), Err(TopologyError::AlreadyDead(0)));
    }

    #[test]
    fn generic_over_f32() {
        let g: FogGraph<f32> = generate_mesh(&params(8, 3), 4).unwrap();
        assert!(g.is_connected());
        assert!(g.path_delay(0, 7).unwrap().is_finite());
    }
}
