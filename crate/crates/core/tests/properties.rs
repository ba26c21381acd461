use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use agentic_fog::agent::{full_action_space, utility_oracle};
use agentic_fog::baselines::{solve_ilp, IlpConfig, IlpInstance, SolveMethod};
use agentic_fog::engine::{random_joint, run, FrozenRun};
use agentic_fog::metrics::{read_events, write_events, MetricsReport};
use agentic_fog::objective::{potential, ObjectiveParams, ObjectiveWeights, RouteTable};
use agentic_fog::orchestrator::{orchestrate, LongTermStats, OrchestratorConfig};
use agentic_fog::topology::generate_mesh;
use agentic_fog::verify::tiny_instance;
use agentic_fog::workload::demand_snapshot;
use agentic_fog::{Controller, Event, FogGraph, Scenario};

fn mesh_instance(
    seed: u64,
    nodes: usize,
    catalog: usize,
    rate: f64,
) -> (FogGraph, agentic_fog::DemandMatrix) {
    let mut s = Scenario::default();
    s.seed = seed;
    s.topology.nodes = nodes;
    s.workload.catalog.size = catalog;
    s.workload.phases.truncate(1);
    s.workload.phases[0].base_rate = rate;
    let g: FogGraph = generate_mesh(&s.mesh(), seed).unwrap();
    let d = demand_snapshot(&s.workload, g.len(), 0);
    (g, d)
}

fn weights() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0..3.0f64, 0.0..3.0f64, 0.0..3.0f64)
}

fn small_run(controller: Controller, seed: u64) -> Scenario {
    let mut s = Scenario::default();
    s.seed = seed;
    s.topology.nodes = 8;
    s.horizon = 260;
    s.workload.catalog.size = 10;
    s.workload.phases.truncate(2);
    s.workload.phases[1].start = 130;
    s.controller = controller;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contributions_sum_to_scalar(seed in 0u64..10_000, nodes in 2usize..18, catalog in 1usize..15, rate in 0.1..12.0f64, w in weights()) {
        let (g, d) = mesh_instance(seed, nodes, catalog, rate);
        let params = ObjectiveParams { weights: ObjectiveWeights::new(w.0, w.1, w.2), ..ObjectiveParams::default() };
        let joint = random_joint(&g, catalog, &mut ChaCha8Rng::seed_from_u64(seed));
        let e = RouteTable::build(&g, &joint, &d).evaluate(&g, &joint, &params);
        let total: f64 = e.contributions.iter().map(|c| c.weighted(&params.weights)).sum();
        prop_assert!((total - e.value.scalar).abs() < 1e-9);
        prop_assert!(e.value.latency >= 0.0 && e.value.cost >= 0.0 && e.value.risk >= 0.0);
    }

    #[test]
    fn unilateral_change_equals_potential_change(seed in 0u64..10_000, nodes in 2usize..14, catalog in 1usize..8, pick in 0usize..1000, w in weights()) {
        let (g, d) = mesh_instance(seed, nodes, catalog, 5.0);
        let params = ObjectiveParams { weights: ObjectiveWeights::new(w.0, w.1, w.2), ..ObjectiveParams::default() };
        let joint = random_joint(&g, catalog, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        let i = pick % g.len();
        let current = joint.get(i).unwrap().clone();
        let all: Vec<usize> = (0..catalog).collect();
        let space = full_action_space(&g, i, &current, &all);
        let cand = space[(pick / g.len()) % space.len()].clone();
        let table = RouteTable::build(&g, &joint, &d);
        let du = utility_oracle(&table, &g, &joint, &params, i, &cand);
        let dphi = potential(&g, &joint.with(i, cand), &d, &params) - potential(&g, &joint, &d, &params);
        prop_assert!((du - dphi).abs() < 1e-9, "du {} dphi {}", du, dphi);
    }

    #[test]
    fn argmin_invariant_to_weight_scaling(seed in 0u64..10_000, k in 0.01..50.0f64) {
        let (g, d, params) = tiny_instance(seed);
        let cfg = IlpConfig { method: SolveMethod::Exhaustive, exhaustive_limit: f64::INFINITY, contents_per_node: None, ..IlpConfig::default() };
        let base = solve_ilp(&IlpInstance::new(g.clone(), d.clone(), params, None, 0), &cfg).unwrap();
        let scaled_params = ObjectiveParams { weights: params.weights.scaled(k), ..params };
        let inst = IlpInstance::new(g.clone(), d.clone(), scaled_params, None, 0);
        let scaled = solve_ilp(&inst, &cfg).unwrap();
        // ties may pick different minimizers; the scaled optimum value must match
        prop_assert!((inst.value(&base.joint) - scaled.value).abs() <= 1e-9 * scaled.value.abs().max(1.0));
        prop_assert!((scaled.value - k * base.value).abs() <= 1e-9 * scaled.value.abs().max(1.0));
    }

    #[test]
    fn exact_optimum_bounds_fixed_point_bounds_start(seed in 0u64..10_000) {
        let (g, d, params) = tiny_instance(seed);
        let cfg = IlpConfig { method: SolveMethod::Exhaustive, exhaustive_limit: f64::INFINITY, contents_per_node: None, ..IlpConfig::default() };
        let opt = solve_ilp(&IlpInstance::new(g.clone(), d.clone(), params, None, 0), &cfg).unwrap();
        let mut s = Scenario::default();
        s.agent.candidate_contents = None;
        let start = random_joint(&g, d.contents(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut f = FrozenRun::from_parts(g, d, params, start, &s);
        let phi0 = f.potential();
        let r = f.converge(10_000).unwrap();
        prop_assert!(opt.value <= r.phi_final() && r.phi_final() <= phi0);
        prop_assert!(r.certificate.passed);
    }

    #[test]
    fn guidance_stays_within_bounds(l in 0.0..100.0f64, c in 0.0..100.0f64, r in 0.0..100.0f64, over in 0.0..1.0f64, w in weights(), width in 0.0..0.9f64) {
        prop_assume!(w.0 + w.1 + w.2 > 0.0);
        let stats = LongTermStats { latency: l, cost: c, risk: r, overload_share: over, mean_arrivals: 1.0, slots: 10 };
        let config = OrchestratorConfig { bound_width: width, ..OrchestratorConfig::default() };
        let g = orchestrate(&stats, &ObjectiveWeights::new(w.0, w.1, w.2), &config, 100);
        prop_assert!(g.within_bounds());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn frozen_descent_is_strict(seed in 0u64..10_000, nodes in 5usize..16) {
        let mut s = Scenario::default();
        s.seed = seed;
        s.topology.nodes = nodes;
        s.workload.catalog.size = 12;
        let mut f = FrozenRun::new(&s).unwrap();
        let r = f.converge(100_000).unwrap();
        prop_assert!(r.strictly_decreasing);
        prop_assert!(r.trajectory.windows(2).all(|w| w[0] - w[1] > s.agent.epsilon_switch));
        prop_assert!(r.certificate.passed);
    }
}

#[test]
fn report_replays_from_event_log() {
    for c in Controller::ALL {
        let s = small_run(c, 3);
        let out = run(&s).unwrap();
        let mut buf = Vec::new();
        write_events(&out.events, &mut buf).unwrap();
        let replayed = MetricsReport::from_events(
            out.report.meta.clone(),
            &read_events(&buf[..]).unwrap(),
            &s.metrics,
        );
        assert_eq!(replayed, out.report, "{c:?}");
    }
}

#[test]
fn overhead_recomputes_from_events() {
    let s = small_run(Controller::Agentic, 5);
    let out = run(&s).unwrap();
    let (mut p2p, mut exchanges) = (0, 0);
    for e in &out.events {
        match e {
            Event::Slot { msgs_p2p, .. } => p2p += msgs_p2p,
            Event::Coordination { exchanges: x, .. } => exchanges += x,
            _ => {}
        }
    }
    assert_eq!(p2p, 2 * exchanges);
    assert_eq!(out.report.messages.mem, out.memory.writes());
}

#[test]
fn guidance_only_on_period_multiples() {
    let s = small_run(Controller::Agentic, 2);
    let out = run(&s).unwrap();
    let slots: Vec<u64> = out
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Guidance { slot, .. } => Some(*slot),
            _ => None,
        })
        .collect();
    assert!(!slots.is_empty());
    assert!(slots.iter().all(|t| t % s.orchestrator.period == 0));
}

#[test]
fn independent_streams_survive_failure_plans() {
    // arrivals come from per-node workload streams, so adding failures
    // leaves the pre-failure request counts unchanged
    let base = small_run(Controller::Greedy, 9);
    let mut failing = base.clone();
    failing.failures.random = Some(agentic_fog::scenario::RandomFailures {
        slot: 100,
        fraction: 0.25,
        preserve_connectivity: true,
    });
    let count = |s: &Scenario| -> Vec<u64> {
        run(s)
            .unwrap()
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Slot { slot, requests, .. } if *slot <= 100 => Some(*requests),
                _ => None,
            })
            .collect()
    };
    assert_eq!(count(&base), count(&failing));
}
