//! Property suites over seeded instances: exact potential, convergence to
//! certified fixed points, the exact-solver bound, failure stability,
//! per-node decomposition and the workload generators.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{solve_ilp, IlpConfig, IlpInstance, SolveMethod};
use crate::engine::{
    failure_stability, random_joint, verify_exact_potential, EngineError, FrozenRun,
};
use crate::objective::{ObjectiveParams, ObjectiveWeights, RouteTable};
use crate::rng::{stream_rng, Stream};
use crate::scenario::Scenario;
use crate::topology::{generate_mesh, FogGraph, NodeSpec};
use crate::workload::{demand_snapshot, sample_poisson, Catalog, DemandMatrix, ZipfTable};

pub const ACTIVATION_BUDGET: u64 = 100_000;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {}: {} ({:.1}s)",
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(
    name: &'static str,
    body: impl FnOnce() -> Result<(bool, String), EngineError>,
) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Default scenario resized to `nodes` with a small catalog.
pub fn instance(seed: u64, nodes: usize, catalog: usize) -> Scenario {
    let mut s = Scenario::default();
    s.seed = seed;
    s.topology.nodes = nodes;
    s.workload.catalog.size = catalog;
    s
}

/// 1000 unilateral deviations over 10 instances of 10 to 20 nodes.
pub fn exact_potential(seed: u64) -> SuiteResult {
    timed("exact potential", || {
        let (mut worst, mut worst_pair, mut trials, mut identity) = (0.0f64, 0.0f64, 0, true);
        for k in 0..10u64 {
            let s = instance(seed + k, 10 + (k as usize * 10) / 9, 10);
            let r = verify_exact_potential(&s, 100)?;
            worst = worst.max(r.max_residual);
            worst_pair = worst_pair.max(r.max_pair_residual);
            trials += r.trials;
            identity &= r.identity_exact;
        }
        let passed = worst < 1e-9 && worst_pair < 1e-9 && identity && trials == 1000;
        Ok((
            passed,
            format!(
                "{trials} deviations, max |dPhi - du| = {worst:.2e}, pair max = {worst_pair:.2e}"
            ),
        ))
    })
}

/// 50 frozen runs of 10 to 30 nodes to certified fixed points.
pub fn convergence(seed: u64) -> SuiteResult {
    timed("convergence", || {
        let (mut ok, mut max_act, mut max_sweeps) = (0, 0, 0);
        let mut failures = Vec::new();
        for k in 0..50u64 {
            let s = instance(seed + k, 10 + (k as usize % 21), 50);
            let mut frozen = FrozenRun::new(&s)?;
            match frozen.converge(ACTIVATION_BUDGET) {
                Ok(r) if r.strictly_decreasing && r.certificate.passed => {
                    ok += 1;
                    max_act = max_act.max(r.activations);
                    max_sweeps = max_sweeps.max(r.sweeps);
                }
                Ok(r) => failures.push(format!(
                    "seed {}: decreasing={} certificate={}",
                    s.seed, r.strictly_decreasing, r.certificate.passed
                )),
                Err(e) => failures.push(format!("seed {}: {e}", s.seed)),
            }
        }
        let mut detail =
            format!("{ok}/50 certified, max {max_act} activations, max {max_sweeps} sweeps");
        if !failures.is_empty() {
            detail += &format!("; {}", failures.join("; "));
        }
        Ok((ok == 50, detail))
    })
}

/// Random instance with at most 4 nodes, 3 contents and cache capacity 2.
pub fn tiny_instance(seed: u64) -> (FogGraph<f64>, DemandMatrix<f64>, ObjectiveParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let m = rng.gen_range(1..=3);
    let nodes = (0..n)
        .map(|id| NodeSpec {
            id,
            compute_capacity: rng.gen_range(1.0..8.0),
            cache_capacity: rng.gen_range(1..=2),
            proc_delay: rng.gen_range(0.5..2.0),
        })
        .collect();
    let mut links = Vec::new();
    for i in 1..n {
        links.push((rng.gen_range(0..i), i, rng.gen_range(1.0..5.0)));
    }
    if n == 4 && rng.gen_bool(0.5) {
        links.push((0, 3, rng.gen_range(1.0..5.0)));
    }
    let graph = FogGraph::with_links(nodes, &links, 20.0);
    let rows = (0..n)
        .map(|_| (0..m).map(|_| rng.gen_range(0.0..4.0)).collect())
        .collect();
    let params = ObjectiveParams {
        weights: ObjectiveWeights::new(1.0, rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0)),
        ..ObjectiveParams::default()
    };
    (graph, DemandMatrix::from_rows(rows), params)
}

/// On 20 tiny instances: exhaustive optimum at or below the agents' fixed
/// point, and branch and bound equal to exhaustive.
pub fn ilp_lower_bound(seed: u64) -> SuiteResult {
    timed("exact solver bound", || {
        let (mut ok, mut gap) = (0, 0.0f64);
        let mut notes = Vec::new();
        let exact = |method| IlpConfig {
            method,
            budget: u64::MAX,
            exhaustive_limit: f64::INFINITY,
            contents_per_node: None,
            ..IlpConfig::default()
        };
        for k in 0..20u64 {
            let (graph, demand, params) = tiny_instance(seed + k);
            let inst = IlpInstance::new(graph.clone(), demand.clone(), params, None, 0);
            let ex = solve_ilp(&inst, &exact(SolveMethod::Exhaustive))?;
            let bb = solve_ilp(&inst, &exact(SolveMethod::BranchAndBound))?;
            let mut s = Scenario::default();
            s.seed = seed + k;
            s.agent.candidate_contents = None;
            let mut rng = stream_rng(s.seed, Stream::InitialPolicy);
            let joint = random_joint(&graph, demand.contents(), &mut rng);
            let mut frozen = FrozenRun::from_parts(graph, demand, params, joint, &s);
            let fixed = frozen.converge(ACTIVATION_BUDGET)?;
            let phi = fixed.phi_final();
            let good = ex.value <= phi && bb.value == ex.value && fixed.certificate.passed;
            if good {
                ok += 1;
            } else {
                notes.push(format!(
                    "instance {}: exhaustive {} b&b {} fixed point {phi}",
                    seed + k,
                    ex.value,
                    bb.value
                ));
            }
            gap = gap.max(phi - ex.value);
        }
        let mut detail = format!("{ok}/20 hold, largest fixed-point excess {gap:.3e}");
        if !notes.is_empty() {
            detail += &format!("; {}", notes.join("; "));
        }
        Ok((ok == 20, detail))
    })
}

/// Kill 10 to 30 percent of nodes after convergence on 20 instances.
pub fn failure_resilience(seed: u64) -> SuiteResult {
    timed("failure stability", || {
        let mut ok = 0;
        let mut worst = 0.0f64;
        let mut notes = Vec::new();
        for k in 0..20u64 {
            let s = instance(seed + k, 10 + (k as usize % 11), 50);
            let fraction = 0.1 + 0.2 * k as f64 / 19.0;
            match failure_stability(&s, fraction, ACTIVATION_BUDGET) {
                Ok(r) => {
                    let good = !r.failed.is_empty()
                        && r.connected
                        && r.memory_unchanged
                        && r.after.certificate.passed
                        && r.after.strictly_decreasing
                        && r.degradation.is_finite();
                    if good {
                        ok += 1;
                        worst = worst.max(r.degradation.abs());
                    } else {
                        notes.push(format!(
                            "seed {}: {} failed, connected={} memory={}",
                            s.seed,
                            r.failed.len(),
                            r.connected,
                            r.memory_unchanged
                        ));
                    }
                }
                Err(e) => notes.push(format!("seed {}: {e}", s.seed)),
            }
        }
        let mut detail =
            format!("{ok}/20 re-terminated with memory intact, max |relative dPhi| = {worst:.3}");
        if !notes.is_empty() {
            detail += &format!("; {}", notes.join("; "));
        }
        Ok((ok == 20, detail))
    })
}

/// Per-node contributions against the global triple on 100 random instances.
pub fn decomposition(seed: u64) -> SuiteResult {
    timed("decomposition", || {
        let mut worst = 0.0f64;
        for k in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) + k);
            let mut s = instance(seed + k, rng.gen_range(2..=25), rng.gen_range(1..=30));
            s.workload.phases[0].base_rate = rng.gen_range(0.5..15.0);
            let graph: FogGraph<f64> = generate_mesh(&s.mesh(), s.seed)?;
            let demand = demand_snapshot(&s.workload, graph.len(), 0);
            let params = ObjectiveParams {
                weights: ObjectiveWeights::new(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                ),
                ..ObjectiveParams::default()
            };
            let joint = random_joint(&graph, demand.contents(), &mut rng);
            let e = RouteTable::build(&graph, &joint, &demand).evaluate(&graph, &joint, &params);
            let sum = |f: fn(&crate::objective::LocalContribution<f64>) -> f64| {
                e.contributions.iter().map(f).sum::<f64>()
            };
            worst = worst
                .max((sum(|c| c.latency) - e.value.latency).abs())
                .max((sum(|c| c.cost) - e.value.cost).abs())
                .max((sum(|c| c.risk) - e.value.risk).abs());
        }
        Ok((
            worst < 1e-9,
            format!("100 instances, max component residual {worst:.2e}"),
        ))
    })
}

/// Zipf frequencies over 1e5 draws and Poisson means over 1e4 slots.
pub fn generators(seed: u64) -> SuiteResult {
    timed("generator statistics", || {
        let catalog = Catalog::default();
        let table = ZipfTable::new(&catalog);
        let mut rng = stream_rng(seed, Stream::Workload);
        let draws = 100_000;
        let mut counts = vec![0u64; table.len()];
        for _ in 0..draws {
            counts[table.sample(&mut rng)] += 1;
        }
        let zipf_dev = counts
            .iter()
            .zip(table.pmf())
            .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
            .fold(0.0, f64::max);
        let mut poisson_dev = 0.0f64;
        for lambda in [0.5, 3.0, 10.0, 45.0] {
            let total: u64 = (0..10_000).map(|_| sample_poisson(&mut rng, lambda)).sum();
            poisson_dev = poisson_dev.max((total as f64 / 10_000.0 - lambda).abs() / lambda);
        }
        let passed = zipf_dev < 0.01 && poisson_dev < 0.025;
        Ok((passed, format!("Zipf max deviation {zipf_dev:.4}, Poisson max relative mean error {poisson_dev:.4}")))
    })
}

/// Every suite in order.
pub fn all(seed: u64) -> Vec<SuiteResult> {
    vec![
        exact_potential(seed),
        convergence(seed),
        ilp_lower_bound(seed),
        failure_resilience(seed),
        decomposition(seed),
        generators(seed),
    ]
}
