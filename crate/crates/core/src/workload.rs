//! Request traffic: piecewise-constant Poisson arrivals with per-node
//! multipliers and Zipf content popularity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::topology::NodeId;

pub type ContentId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("catalog must hold at least one content")]
    EmptyCatalog,
    #[error("zipf exponent must exceed 1, got {0}")]
    ZipfExponent(f64),
    #[error("rank {rank} outside 1..={size}")]
    RankOutOfRange { rank: usize, size: usize },
    #[error("demand profile has no phases")]
    NoPhases,
    #[error("phase start times must be strictly increasing and begin at 0")]
    PhaseOrder,
    #[error("negative or non-finite rate in phase starting at {0}")]
    BadRate(u64),
    #[error("phase starting at {start} has {got} multipliers for {nodes} nodes")]
    MultiplierCount {
        start: u64,
        got: usize,
        nodes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Catalog {
    pub size: usize,
    pub zipf_s: f64,
}

impl Default for Catalog {
    fn default() -> Self {
        Self {
            size: 50,
            zipf_s: 1.2,
        }
    }
}

impl Catalog {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.size == 0 {
            return Err(WorkloadError::EmptyCatalog);
        }
        if !(self.zipf_s > 1.0) || !self.zipf_s.is_finite() {
            return Err(WorkloadError::ZipfExponent(self.zipf_s));
        }
        Ok(())
    }
}

/// Probability of the content at 1-based popularity `rank`.
pub fn zipf_pmf<S: Scalar>(catalog: &Catalog, rank: usize) -> Result<S, WorkloadError> {
    if rank == 0 || rank > catalog.size {
        return Err(WorkloadError::RankOutOfRange {
            rank,
            size: catalog.size,
        });
    }
    let s = S::lit(catalog.zipf_s);
    let norm: S = (1..=catalog.size).map(|j| S::lit(j as f64).powf(-s)).sum();
    Ok(S::lit(rank as f64).powf(-s) / norm)
}

/// Precomputed pmf and cdf for inversion sampling. Content id `c` has rank `c + 1`.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(catalog: &Catalog) -> Self {
        let s = catalog.zipf_s;
        let weights: Vec<f64> = (1..=catalog.size).map(|k| (k as f64).powf(-s)).collect();
        let norm: f64 = weights.iter().sum();
        let pmf: Vec<f64> = weights.iter().map(|w| w / norm).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { pmf, cdf }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ContentId {
        let u: f64 = rng.gen();
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }
}

/// Knuth's multiplication method; large means are split into chunks so
/// `exp(-mean)` never underflows.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    const CHUNK: f64 = 30.0;
    let mut remaining = mean;
    let mut total = 0;
    while remaining > 0.0 {
        let lambda = remaining.min(CHUNK);
        remaining -= lambda;
        let limit = (-lambda).exp();
        let mut product: f64 = rng.gen();
        while product > limit {
            total += 1;
            product *= rng.gen::<f64>();
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start: u64,
    pub base_rate: f64,
    /// Per-node multipliers; empty means 1.0 everywhere.
    #[serde(default)]
    pub node_multipliers: Vec<f64>,
    /// Rotates popularity: the content at Zipf rank `r` (0-based) is
    /// `(r + popularity_shift) % catalog size`.
    #[serde(default)]
    pub popularity_shift: usize,
}

impl Phase {
    pub fn multiplier(&self, node: NodeId) -> f64 {
        if self.node_multipliers.is_empty() {
            1.0
        } else {
            self.node_multipliers.get(node).copied().unwrap_or(0.0)
        }
    }

    pub fn rate(&self, node: NodeId) -> f64 {
        self.base_rate * self.multiplier(node)
    }

    pub fn content_at_rank(&self, rank: usize, catalog_size: usize) -> ContentId {
        (rank + self.popularity_shift) % catalog_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub catalog: Catalog,
}

impl Default for DemandProfile {
    fn default() -> Self {
        Self {
            phases: vec![Phase {
                start: 0,
                base_rate: 4.0,
                node_multipliers: Vec::new(),
                popularity_shift: 0,
            }],
            catalog: Catalog::default(),
        }
    }
}

impl DemandProfile {
    pub fn validate(&self, nodes: usize) -> Result<(), WorkloadError> {
        self.catalog.validate()?;
        let first = self.phases.first().ok_or(WorkloadError::NoPhases)?;
        if first.start != 0 || self.phases.windows(2).any(|w| w[0].start >= w[1].start) {
            return Err(WorkloadError::PhaseOrder);
        }
        for p in &self.phases {
            if !p.base_rate.is_finite()
                || p.base_rate < 0.0
                || p.node_multipliers
                    .iter()
                    .any(|m| !m.is_finite() || *m < 0.0)
            {
                return Err(WorkloadError::BadRate(p.start));
            }
            if !p.node_multipliers.is_empty() && p.node_multipliers.len() != nodes {
                return Err(WorkloadError::MultiplierCount {
                    start: p.start,
                    got: p.node_multipliers.len(),
                    nodes,
                });
            }
        }
        Ok(())
    }

    /// Phase in effect at slot `t`.
    pub fn phase_at(&self, t: u64) -> &Phase {
        let idx = self.phases.partition_point(|p| p.start <= t);
        &self.phases[idx.saturating_sub(1)]
    }

    pub fn rate_at(&self, node: NodeId, t: u64) -> f64 {
        self.phase_at(t).rate(node)
    }

    /// Slots at which the phase changes (excluding 0).
    pub fn shift_slots(&self) -> Vec<u64> {
        self.phases.iter().skip(1).map(|p| p.start).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub arrival_time: f64,
    pub ingress: NodeId,
    pub content: ContentId,
}

/// Requests arriving at `node` during slot `[slot, slot + 1)`, sorted by time.
pub fn sample_arrivals<R: Rng + ?Sized>(
    profile: &DemandProfile,
    zipf: &ZipfTable,
    node: NodeId,
    slot: u64,
    rng: &mut R,
) -> Vec<Request> {
    let phase = profile.phase_at(slot);
    let count = sample_poisson(rng, phase.rate(node));
    let mut out: Vec<Request> = (0..count)
        .map(|_| Request {
            arrival_time: slot as f64 + rng.gen::<f64>(),
            ingress: node,
            content: phase.content_at_rank(zipf.sample(rng), zipf.len()),
        })
        .collect();
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    out
}

/// Expected request rate per (node, content).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct DemandMatrix<S> {
    nodes: usize,
    contents: usize,
    rates: Vec<S>,
}

impl<S: Scalar> DemandMatrix<S> {
    pub fn zeros(nodes: usize, contents: usize) -> Self {
        Self {
            nodes,
            contents,
            rates: vec![S::zero(); nodes * contents],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nodes = rows.len();
        let contents = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(nodes, contents);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), contents, "ragged demand rows");
            for (c, &r) in row.iter().enumerate() {
                m.set(i, c, S::lit(r));
            }
        }
        m
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn contents(&self) -> usize {
        self.contents
    }

    pub fn rate(&self, node: NodeId, content: ContentId) -> S {
        self.rates[node * self.contents + content]
    }

    pub fn set(&mut self, node: NodeId, content: ContentId, rate: S) {
        self.rates[node * self.contents + content] = rate;
    }

    pub fn row(&self, node: NodeId) -> &[S] {
        &self.rates[node * self.contents..(node + 1) * self.contents]
    }

    pub fn row_sum(&self, node: NodeId) -> S {
        self.row(node).iter().copied().sum()
    }

    pub fn total(&self) -> S {
        self.rates.iter().copied().sum()
    }

    pub fn zero_row(&mut self, node: NodeId) {
        for c in 0..self.contents {
            self.set(node, c, S::zero());
        }
    }

    /// Matrix holding only `node`'s row.
    pub fn only_row(&self, node: NodeId) -> Self {
        let mut m = Self::zeros(self.nodes, self.contents);
        for c in 0..self.contents {
            m.set(node, c, self.rate(node, c));
        }
        m
    }

    pub fn map<T: Scalar>(&self) -> DemandMatrix<T> {
        DemandMatrix {
            nodes: self.nodes,
            contents: self.contents,
            rates: self.rates.iter().map(|r| T::lit(r.as_f64())).collect(),
        }
    }
}

/// Expected rate matrix at slot `t`: entry `(i, c) = rate_i(t) * pmf(c)`.
pub fn demand_snapshot<S: Scalar>(
    profile: &DemandProfile,
    nodes: usize,
    t: u64,
) -> DemandMatrix<S> {
    let phase = profile.phase_at(t);
    let catalog = &profile.catalog;
    let s = S::lit(catalog.zipf_s);
    let weights: Vec<S> = (1..=catalog.size)
        .map(|k| S::lit(k as f64).powf(-s))
        .collect();
    let norm: S = weights.iter().copied().sum();
    let mut m = DemandMatrix::zeros(nodes, catalog.size);
    for i in 0..nodes {
        let rate = S::lit(phase.rate(i));
        for (r, w) in weights.iter().enumerate() {
            m.set(i, phase.content_at_rank(r, catalog.size), rate * *w / norm);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn profile(phases: Vec<Phase>, size: usize, s: f64) -> DemandProfile {
        DemandProfile {
            phases,
            catalog: Catalog { size, zipf_s: s },
        }
    }

    fn flat(rate: f64) -> Phase {
        Phase {
            start: 0,
            base_rate: rate,
            node_multipliers: Vec::new(),
            popularity_shift: 0,
        }
    }

    #[test]
    fn single_item_catalog() {
        let c = Catalog {
            size: 1,
            zipf_s: 1.5,
        };
        assert_eq!(zipf_pmf::<f64>(&c, 1).unwrap(), 1.0);
    }

    #[test]
    fn three_item_catalog_matches_hand_sum() {
        // H = 1 + 1/4 + 1/9 = 49/36, p(1) = 36/49
        let c = Catalog {
            size: 3,
            zipf_s: 2.0,
        };
        let p1 = zipf_pmf::<f64>(&c, 1).unwrap();
        assert!((p1 - 36.0 / 49.0).abs() < 1e-15);
        assert!((zipf_pmf::<f64>(&c, 3).unwrap() - 4.0 / 49.0).abs() < 1e-15);
    }

    #[test]
    fn pmf_normalized_and_decreasing() {
        for &(size, s) in &[(10, 1.1), (50, 1.2), (500, 2.5)] {
            let c = Catalog { size, zipf_s: s };
            let p: Vec<f64> = (1..=size).map(|k| zipf_pmf(&c, k).unwrap()).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn pmf_rank_errors() {
        let c = Catalog {
            size: 3,
            zipf_s: 2.0,
        };
        assert!(zipf_pmf::<f64>(&c, 0).is_err());
        assert!(zipf_pmf::<f64>(&c, 4).is_err());
        assert_eq!(
            Catalog {
                size: 3,
                zipf_s: 1.0
            }
            .validate(),
            Err(WorkloadError::ZipfExponent(1.0))
        );
    }

    #[test]
    fn zero_rate_yields_nothing() {
        let p = profile(vec![flat(0.0)], 5, 1.2);
        let z = ZipfTable::new(&p.catalog);
        let mut rng = stream_rng(1, Stream::Workload);
        for t in 0..100 {
            assert!(sample_arrivals(&p, &z, 0, t, &mut rng).is_empty());
        }
    }

    #[test]
    fn poisson_mean_matches_rate() {
        let p = profile(vec![flat(4.0)], 5, 1.2);
        let z = ZipfTable::new(&p.catalog);
        let mut rng = stream_rng(3, Stream::Workload);
        let total: usize = (0..10_000)
            .map(|t| sample_arrivals(&p, &z, 0, t, &mut rng).len())
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((3.9..=4.1).contains(&mean), "mean {mean}");
    }

    #[test]
    fn phase_shift_doubles_mean() {
        let p = profile(
            vec![
                flat(3.0),
                Phase {
                    start: 500,
                    base_rate: 6.0,
                    node_multipliers: Vec::new(),
                    popularity_shift: 0,
                },
            ],
            5,
            1.2,
        );
        let z = ZipfTable::new(&p.catalog);
        let mut rng = stream_rng(5, Stream::Workload);
        let before: usize = (0..500)
            .map(|t| sample_arrivals(&p, &z, 0, t, &mut rng).len())
            .sum();
        let after: usize = (500..1000)
            .map(|t| sample_arrivals(&p, &z, 0, t, &mut rng).len())
            .sum();
        let ratio = after as f64 / before as f64;
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn arrivals_are_sorted_and_in_slot() {
        let p = profile(vec![flat(20.0)], 8, 1.3);
        let z = ZipfTable::new(&p.catalog);
        let mut rng = stream_rng(9, Stream::Workload);
        let reqs = sample_arrivals(&p, &z, 3, 42, &mut rng);
        assert!(reqs
            .windows(2)
            .all(|w| w[0].arrival_time <= w[1].arrival_time));
        assert!(reqs.iter().all(|r| r.arrival_time >= 42.0
            && r.arrival_time < 43.0
            && r.ingress == 3
            && r.content < 8));
    }

    #[test]
    fn identical_seed_identical_stream() {
        let p = profile(vec![flat(5.0)], 10, 1.2);
        let z = ZipfTable::new(&p.catalog);
        let draw = |seed| {
            let mut rng = stream_rng(seed, Stream::Workload);
            (0..200)
                .flat_map(|t| sample_arrivals(&p, &z, 1, t, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn snapshot_single_cell() {
        let p = profile(vec![flat(3.0)], 1, 1.5);
        let m: DemandMatrix<f64> = demand_snapshot(&p, 1, 0);
        assert_eq!(m.rate(0, 0), 3.0);
    }

    #[test]
    fn snapshot_sums_to_node_rates() {
        let p = profile(
            vec![Phase {
                start: 0,
                base_rate: 2.0,
                node_multipliers: vec![1.0, 0.5, 3.0],
                popularity_shift: 0,
            }],
            20,
            1.2,
        );
        let m: DemandMatrix<f64> = demand_snapshot(&p, 3, 0);
        assert!((m.total() - 2.0 * 4.5).abs() < 1e-12);
        assert!((m.row_sum(2) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_follows_phase_table() {
        let p = profile(
            vec![
                Phase {
                    start: 0,
                    base_rate: 2.0,
                    node_multipliers: vec![1.0, 1.0],
                    popularity_shift: 0,
                },
                Phase {
                    start: 100,
                    base_rate: 2.0,
                    node_multipliers: vec![0.5, 4.0],
                    popularity_shift: 0,
                },
            ],
            4,
            2.0,
        );
        let before: DemandMatrix<f64> = demand_snapshot(&p, 2, 99);
        let after: DemandMatrix<f64> = demand_snapshot(&p, 2, 100);
        assert!((before.row_sum(1) - 2.0).abs() < 1e-12);
        assert!((after.row_sum(0) - 1.0).abs() < 1e-12);
        assert!((after.row_sum(1) - 8.0).abs() < 1e-12);
        // piecewise constant inside a phase
        assert_eq!(demand_snapshot::<f64>(&p, 2, 150), after);
    }

    #[test]
    fn profile_validation() {
        let bad_order = profile(
            vec![
                flat(1.0),
                Phase {
                    start: 0,
                    base_rate: 1.0,
                    node_multipliers: vec![],
                    popularity_shift: 0,
                },
            ],
            3,
            1.2,
        );
        assert_eq!(bad_order.validate(2), Err(WorkloadError::PhaseOrder));
        let bad_mult = profile(
            vec![Phase {
                start: 0,
                base_rate: 1.0,
                node_multipliers: vec![1.0],
                popularity_shift: 0,
            }],
            3,
            1.2,
        );
        assert!(matches!(
            bad_mult.validate(2),
            Err(WorkloadError::MultiplierCount { .. })
        ));
        assert_eq!(
            profile(vec![flat(-1.0)], 3, 1.2).validate(2),
            Err(WorkloadError::BadRate(0))
        );
    }

    #[test]
    fn popularity_shift_rotates_ranks() {
        let catalog = Catalog {
            size: 3,
            zipf_s: 2.0,
        };
        let profile = DemandProfile {
            phases: vec![Phase {
                start: 0,
                base_rate: 1.0,
                node_multipliers: Vec::new(),
                popularity_shift: 2,
            }],
            catalog: catalog.clone(),
        };
        let m = demand_snapshot::<f64>(&profile, 1, 0);
        assert!((m.rate(0, 2) - 36.0 / 49.0).abs() < 1e-12);
        assert!((m.rate(0, 0) - 9.0 / 49.0).abs() < 1e-12);
        let zipf = ZipfTable::new(&catalog);
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Workload);
        let mut hits = [0usize; 3];
        for t in 0..2000 {
            for r in sample_arrivals(&profile, &zipf, 0, t, &mut rng) {
                hits[r.content] += 1;
            }
        }
        assert!(hits[2] > hits[0] && hits[2] > hits[1]);
    }
}
