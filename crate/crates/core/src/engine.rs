//! The slotted simulator and the frozen-snapshot verification mode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    best_response, context_key, full_action_space, move_neighborhood, observe, observed_inflow,
    popularity_order, utility_oracle, Advert, Classifier, FogAgent, LocalModel, LocalView,
    UtilityMode,
};
use crate::baselines::{greedy_step, solve_ilp, IlpError, IlpInstance};
use crate::coordination::coordination_round;
use crate::execution::{apply_action, execute, Task, TaskKind};
use crate::metrics::{Event, MetricsReport, RunMeta};
use crate::objective::{potential, Forward, JointAction, NodeAction, ObjectiveParams, RouteTable};
use crate::orchestrator::{orchestrate, LongTermStats};
use crate::rng::{stream_rng, substream_rng, SimRng, Stream};
use crate::scenario::{Controller, Scenario, ScenarioError};
use crate::shared_memory::{
    DigestEntry, EpisodeRecord, MemoryError, SharedMemory, SharedView, TopologySummary,
};
use crate::topology::{generate_mesh, FogGraph, NodeId, TopologyError};
use crate::workload::{demand_snapshot, sample_arrivals, ContentId, DemandMatrix, ZipfTable};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("ilp: {0}")]
    Ilp(#[from] IlpError),
    #[error("shared memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("no fixed point within {activations} activations")]
    BudgetExceeded { activations: u64 },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub events: Vec<Event>,
    pub memory: SharedMemory,
    pub graph: FogGraph<f64>,
    pub joint: JointAction,
}

/// Runs `scenario` for its full horizon.
pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    scenario.validate()?;
    let mut sim = Simulation::new(scenario)?;
    for t in 0..scenario.horizon {
        sim.step(t)?;
    }
    let meta = RunMeta {
        scenario_hash: scenario.hash(),
        controller: scenario.controller.name().into(),
        seed: scenario.seed,
        horizon: scenario.horizon,
        shifts: scenario.workload.shift_slots(),
    };
    let report = MetricsReport::from_events(meta, &sim.events, &scenario.metrics);
    Ok(RunOutput {
        report,
        events: sim.events,
        memory: sim.memory,
        graph: sim.graph,
        joint: sim.joint,
    })
}

struct Simulation<'a> {
    sc: &'a Scenario,
    graph: FogGraph<f64>,
    joint: JointAction,
    agents: Vec<FogAgent>,
    memory: SharedMemory,
    params: ObjectiveParams<f64>,
    effective: ObjectiveParams<f64>,
    zipf: ZipfTable,
    arrival_rngs: Vec<SimRng>,
    activation: SimRng,
    exploration: SimRng,
    failures: SimRng,
    truth: DemandMatrix<f64>,
    truth_phase: usize,
    events: Vec<Event>,
}

#[derive(Default)]
struct SlotCounters {
    msgs_p2p: u64,
    msgs_ilp: u64,
    moves: u64,
    task_failures: u64,
}

impl<'a> Simulation<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, EngineError> {
        let graph: FogGraph<f64> = generate_mesh(&sc.mesh(), sc.seed)?;
        let n = graph.len();
        let contents = sc.workload.catalog.size;
        let params = sc.objective.params::<f64>();
        let mut memory = SharedMemory::new(sc.memory.clone());
        if sc.controller == Controller::Agentic {
            memory.publish_topology(topology_summary(&graph, 0));
        }
        Ok(Self {
            joint: JointAction::empty_for(&graph),
            agents: (0..n)
                .map(|i| FogAgent::new(i, contents, sc.agent.local_memory))
                .collect(),
            memory,
            effective: params,
            params,
            zipf: ZipfTable::new(&sc.workload.catalog),
            arrival_rngs: (0..n)
                .map(|i| substream_rng(sc.seed, Stream::Workload, i as u64))
                .collect(),
            activation: stream_rng(sc.seed, Stream::Activation),
            exploration: stream_rng(sc.seed, Stream::Exploration),
            failures: stream_rng(sc.seed, Stream::Failures),
            truth: demand_snapshot(&sc.workload, n, 0),
            truth_phase: phase_index(sc, 0),
            events: Vec::new(),
            graph,
            sc,
        })
    }

    fn measured(&self) -> DemandMatrix<f64> {
        let rows = self
            .agents
            .iter()
            .map(|a| {
                if self.graph.is_alive(a.id) {
                    a.demand_estimate.clone()
                } else {
                    vec![0.0; a.demand_estimate.len()]
                }
            })
            .collect();
        DemandMatrix::from_rows(rows)
    }

    fn step(&mut self, t: u64) -> Result<(), EngineError> {
        let sc = self.sc;
        let mut counters = SlotCounters::default();
        let writes_before = self.memory.writes();

        // arrivals
        let catalog = sc.workload.catalog.size;
        let mut requests = Vec::new();
        let mut per_node = vec![0u32; self.graph.len()];
        for (i, rng) in self.arrival_rngs.iter_mut().enumerate() {
            // every node draws each slot so a failure elsewhere never shifts a stream
            let arrivals = sample_arrivals(&sc.workload, &self.zipf, i, t, rng);
            if !self.graph.is_alive(i) {
                continue;
            }
            let mut counts = vec![0u32; catalog];
            for r in &arrivals {
                counts[r.content] += 1;
            }
            per_node[i] = arrivals.len() as u32;
            self.agents[i].observe_arrivals(&counts, &sc.agent);
            requests.extend(arrivals);
        }
        let measured = self.measured();

        match sc.controller {
            Controller::Agentic => self.agentic_step(&measured, t, &mut counters),
            Controller::Greedy => self.greedy_step(t, &mut counters),
            Controller::Ilp => {
                if t.is_multiple_of(sc.baselines.period) {
                    self.ilp_solve(&measured, t, &mut counters)?;
                }
            }
        }

        if sc.controller == Controller::Agentic
            && sc.coordination.enabled
            && t > 0
            && t.is_multiple_of(sc.coordination.interval)
        {
            let contents: Vec<Vec<ContentId>> = self
                .agents
                .iter()
                .map(|a| a.candidate_contents(sc.agent.candidate_contents))
                .collect();
            let out = coordination_round(
                &self.graph,
                &mut self.joint,
                &measured,
                &self.effective,
                &sc.coordination,
                &contents,
                sc.agent.epsilon_switch,
                t,
            );
            counters.msgs_p2p += out.messages;
            counters.moves += out.changes.len() as u64;
            self.events.push(Event::Coordination {
                slot: t,
                exchanges: out.exchanges,
                conflicts: out.conflicts.len(),
                changes: out.changes.len(),
            });
        }

        if sc.controller == Controller::Agentic
            && sc.orchestrator.enabled
            && t > 0
            && t.is_multiple_of(sc.orchestrator.period)
        {
            let stats = LongTermStats::from_digest(self.memory.digest().entries.iter());
            let guidance = orchestrate(&stats, &self.params.weights, &sc.orchestrator, t);
            self.effective.weights = guidance.effective;
            self.events.push(Event::Guidance {
                slot: t,
                ranking: guidance.ranking.clone(),
            });
            self.memory.publish_guidance(guidance)?;
        }

        // serve this slot's requests on the placement now in force
        let phase = phase_index(sc, t);
        if phase != self.truth_phase {
            self.truth = demand_snapshot(&sc.workload, self.graph.len(), t);
            self.truth_phase = phase;
        }
        let mut truth = self.truth.clone();
        for i in 0..self.graph.len() {
            if !self.graph.is_alive(i) {
                truth.zero_row(i);
            }
        }
        let table = RouteTable::build(&self.graph, &self.joint, &truth);
        let mut latency_sum = 0.0;
        for r in &requests {
            let route = table.route(&self.graph, &self.joint, r.ingress, r.content);
            latency_sum += table.latency_of(&self.graph, &route);
            if let Some(server) = route.server {
                let status = execute(
                    &self.graph,
                    &mut self.joint,
                    Task {
                        kind: TaskKind::Serve { node: server },
                        content: r.content,
                        slot: t,
                    },
                );
                if !status.succeeded() {
                    counters.task_failures += 1;
                }
            }
        }
        let value = table.evaluate(&self.graph, &self.joint, &self.params).value;

        if sc.controller == Controller::Agentic {
            let m_table = RouteTable::build(&self.graph, &self.joint, &measured);
            let m = m_table
                .evaluate(&self.graph, &self.joint, &self.params)
                .value;
            let rho = self.params.rho_max;
            let overloaded = self
                .graph
                .alive_nodes()
                .filter(|&i| m_table.load(i) / self.graph.node(i).compute_capacity > rho)
                .count();
            self.memory.record_digest(DigestEntry {
                slot: t,
                arrivals: per_node,
                latency: m.latency,
                cost: m.cost,
                risk: m.risk,
                overloaded,
            });
        }

        self.apply_failures(t)?;

        self.events.push(Event::Slot {
            slot: t,
            expected_latency: value.latency,
            phi: value.scalar,
            latency_sum,
            requests: requests.len() as u64,
            msgs_p2p: counters.msgs_p2p,
            msgs_mem: self.memory.writes() - writes_before,
            msgs_ilp: counters.msgs_ilp,
            moves: counters.moves,
            task_failures: counters.task_failures,
        });
        Ok(())
    }

    /// Alive nodes in a seeded random order, each kept with the activation probability.
    fn activated(&mut self) -> Vec<NodeId> {
        let mut order: Vec<NodeId> = self.graph.alive_nodes().collect();
        order.shuffle(&mut self.activation);
        let p = self.sc.agent.activation_prob;
        order
            .into_iter()
            .filter(|_| self.activation.gen::<f64>() < p)
            .collect()
    }

    fn candidates(&self, node: NodeId) -> Vec<NodeAction> {
        let cfg = &self.sc.agent;
        let contents = self.agents[node].candidate_contents(cfg.candidate_contents);
        let current = self
            .joint
            .get(node)
            .cloned()
            .unwrap_or_else(NodeAction::empty);
        if cfg.full_enumeration {
            let mut sorted = contents;
            sorted.sort_unstable();
            full_action_space(&self.graph, node, &current, &sorted)
        } else {
            move_neighborhood(&self.graph, node, &current, &contents)
        }
    }

    fn agentic_step(&mut self, measured: &DemandMatrix<f64>, t: u64, counters: &mut SlotCounters) {
        let cfg = self.sc.agent.clone();
        let params = self.effective;
        let rho = params.rho_max;
        let mut table = RouteTable::build(&self.graph, &self.joint, measured);
        for node in self.activated() {
            let cands = self.candidates(node);
            let view = LocalView::new(&self.graph, &self.joint, measured, table.loads(), node);
            let state = observe(&view);
            let ctx = context_key(&state, self.graph.node(node).compute_capacity, rho);
            let classifier = Classifier::new(&view);
            let shared = self.memory.read(node, t);
            let demand_total = total_demand_estimate(&shared, &view);
            let advertised = |j: NodeId, c: ContentId| {
                Advert::of(&self.graph, &self.joint, &table, rho, j, node, c)
            };
            let model = (cfg.mode == UtilityMode::Informed).then(|| {
                let inflow = observed_inflow(&self.graph, &table, node);
                LocalModel::new(&view, &params, demand_total, &inflow, advertised)
            });
            let local = |a: &NodeAction| model.as_ref().map_or(0.0, |m| m.delta(a));
            let decision = match cfg.mode {
                UtilityMode::Oracle => best_response(
                    &cands,
                    |a| utility_oracle(&table, &self.graph, &self.joint, &params, node, a),
                    cfg.epsilon_switch,
                ),
                UtilityMode::Estimated | UtilityMode::Informed => self.agents[node]
                    .decide_estimated(
                        &cands,
                        &classifier,
                        &shared,
                        ctx,
                        &cfg,
                        self.memory.config.pooled,
                        (cfg.mode == UtilityMode::Informed)
                            .then_some(&local as &dyn Fn(&NodeAction) -> f64),
                        &mut self.exploration,
                    ),
            };
            let predicted = if cfg.mode == UtilityMode::Informed {
                local(&decision.action)
            } else {
                0.0
            };
            if !decision.switched {
                continue;
            }
            let class = classifier.classify(&cands[0], &decision.action);
            let delta =
                table.deviation_delta(&self.graph, &self.joint, &params, node, &decision.action);
            let statuses = apply_action(&self.graph, &mut self.joint, node, &decision.action, t);
            if statuses.iter().all(|s| s.succeeded()) {
                counters.moves += 1;
                self.agents[node].record_outcome(&mut self.memory, ctx, class, delta, predicted, t);
                table = RouteTable::build(&self.graph, &self.joint, measured);
            } else {
                counters.task_failures += statuses.iter().filter(|s| !s.succeeded()).count() as u64;
            }
        }
    }

    fn greedy_step(&mut self, t: u64, counters: &mut SlotCounters) {
        let eps = self.sc.agent.epsilon_switch;
        for node in self.activated() {
            let cands = self.candidates(node);
            let own = self.agents[node].demand_estimate.clone();
            let decision = greedy_step(&self.graph, &self.joint, &own, node, &cands, eps);
            if !decision.switched {
                continue;
            }
            let statuses = apply_action(&self.graph, &mut self.joint, node, &decision.action, t);
            if statuses.iter().all(|s| s.succeeded()) {
                counters.moves += 1;
            } else {
                counters.task_failures += statuses.iter().filter(|s| !s.succeeded()).count() as u64;
            }
        }
    }

    fn ilp_solve(
        &mut self,
        measured: &DemandMatrix<f64>,
        t: u64,
        counters: &mut SlotCounters,
    ) -> Result<(), EngineError> {
        let cfg = &self.sc.baselines;
        let instance = IlpInstance::new(
            self.graph.clone(),
            measured.clone(),
            self.params,
            cfg.contents_per_node,
            t,
        );
        let solution = solve_ilp(&instance, cfg)?;
        counters.msgs_ilp += 2 * self.graph.alive_count() as u64;
        counters.moves += self
            .graph
            .alive_nodes()
            .filter(|&i| self.joint.get(i) != solution.joint.get(i))
            .count() as u64;
        self.joint = solution.joint;
        self.joint.sanitize(&self.graph);
        self.events.push(Event::IlpSolve {
            slot: t,
            value: solution.value,
            status: solution.status,
            explored: solution.explored,
        });
        Ok(())
    }

    fn apply_failures(&mut self, t: u64) -> Result<(), EngineError> {
        let plan = &self.sc.failures;
        let mut victims: Vec<NodeId> = plan
            .scheduled
            .iter()
            .filter(|f| f.slot == t && self.graph.is_alive(f.node))
            .map(|f| f.node)
            .collect();
        if let Some(r) = plan.random.filter(|r| r.slot == t) {
            let mut probe = self.graph.clone();
            for &v in &victims {
                probe.fail_node(v)?;
            }
            victims.extend(pick_failures(
                &probe,
                r.fraction,
                r.preserve_connectivity,
                &mut self.failures,
            ));
        }
        if victims.is_empty() {
            return Ok(());
        }
        let was_connected = self.graph.is_connected();
        for &v in &victims {
            self.graph.fail_node(v)?;
            self.events.push(Event::NodeFailed { slot: t, node: v });
        }
        self.joint.sanitize(&self.graph);
        if was_connected && !self.graph.is_connected() {
            self.events.push(Event::ConnectivityLost {
                slot: t,
                components: self.graph.components().len(),
            });
        }
        if self.sc.controller == Controller::Agentic {
            self.memory
                .publish_topology(topology_summary(&self.graph, t));
        }
        Ok(())
    }
}

/// Mean per-slot network arrivals from the visible digest; the agent's own
/// rate times the alive count before any digest exists.
fn total_demand_estimate(shared: &SharedView<'_>, view: &LocalView<'_, f64>) -> f64 {
    let (sum, n) = shared.digest().fold((0.0, 0usize), |(s, n), e| {
        (s + e.arrivals.iter().map(|&a| a as f64).sum::<f64>(), n + 1)
    });
    if n > 0 && sum > 0.0 {
        return sum / n as f64;
    }
    let alive = shared.topology().map_or(1, |t| t.alive.len());
    view.own_demand().iter().sum::<f64>() * alive as f64
}

fn phase_index(sc: &Scenario, t: u64) -> usize {
    sc.workload.phases.iter().filter(|p| p.start <= t).count()
}

fn topology_summary(graph: &FogGraph<f64>, slot: u64) -> TopologySummary {
    TopologySummary {
        alive: graph.alive_nodes().collect(),
        degrees: graph
            .alive_nodes()
            .map(|i| (i, graph.alive_degree(i)))
            .collect(),
        updated: slot,
    }
}

/// `round(fraction * alive)` victims drawn without replacement. With
/// `preserve_connectivity` a candidate is only taken if the survivors stay
/// connected; fewer victims are returned when no such candidate remains.
pub fn pick_failures(
    graph: &FogGraph<f64>,
    fraction: f64,
    preserve_connectivity: bool,
    rng: &mut SimRng,
) -> Vec<NodeId> {
    let alive: Vec<NodeId> = graph.alive_nodes().collect();
    let target = (fraction * alive.len() as f64).round() as usize;
    let target = target.min(alive.len().saturating_sub(1));
    let mut probe = graph.clone();
    let mut pool = alive;
    pool.shuffle(rng);
    let mut out = Vec::new();
    for v in pool {
        if out.len() == target {
            break;
        }
        if preserve_connectivity && !probe.removal_keeps_connectivity(v) {
            continue;
        }
        probe.fail_node(v).expect("pool holds alive nodes");
        out.push(v);
    }
    out.sort_unstable();
    out
}

/// Outcome of the exhaustive no-improving-deviation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashCertificate {
    pub passed: bool,
    pub deviations_checked: u64,
    /// Most negative potential change found (0 if none improves).
    pub best_improvement: f64,
    pub violator: Option<(NodeId, NodeAction)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Potential at the start and after every accepted move.
    pub trajectory: Vec<f64>,
    pub accepted: u64,
    pub activations: u64,
    /// Full sweeps including the final quiet one.
    pub sweeps: u64,
    pub strictly_decreasing: bool,
    pub certificate: NashCertificate,
}

impl ConvergenceReport {
    pub fn phi_final(&self) -> f64 {
        self.trajectory.last().copied().unwrap_or(0.0)
    }
}

/// One demand snapshot with oracle utilities, for the convergence and
/// failure-stability checks.
#[derive(Debug, Clone)]
pub struct FrozenRun {
    pub graph: FogGraph<f64>,
    pub demand: DemandMatrix<f64>,
    pub params: ObjectiveParams<f64>,
    pub joint: JointAction,
    /// Contents each node may add, sorted.
    pub contents: Vec<Vec<ContentId>>,
    pub epsilon_switch: f64,
    pub full_enumeration: bool,
    pub memory: SharedMemory,
    activation: SimRng,
    failures: SimRng,
}

impl FrozenRun {
    /// Snapshot at slot 0 with a random initial placement.
    pub fn new(scenario: &Scenario) -> Result<Self, EngineError> {
        scenario.validate()?;
        let graph: FogGraph<f64> = generate_mesh(&scenario.mesh(), scenario.seed)?;
        let demand = demand_snapshot(&scenario.workload, graph.len(), 0);
        let mut rng = stream_rng(scenario.seed, Stream::InitialPolicy);
        let joint = random_joint(&graph, scenario.workload.catalog.size, &mut rng);
        Ok(Self::from_parts(
            graph,
            demand,
            scenario.objective.params(),
            joint,
            scenario,
        ))
    }

    pub fn from_parts(
        graph: FogGraph<f64>,
        demand: DemandMatrix<f64>,
        params: ObjectiveParams<f64>,
        joint: JointAction,
        scenario: &Scenario,
    ) -> Self {
        let contents = (0..graph.len())
            .map(|i| {
                let order = popularity_order(demand.row(i));
                let mut c: Vec<ContentId> = match scenario.agent.candidate_contents {
                    Some(k) => order.into_iter().take(k).collect(),
                    None => order,
                };
                c.sort_unstable();
                c
            })
            .collect();
        Self {
            graph,
            demand,
            params,
            joint,
            contents,
            epsilon_switch: scenario.agent.epsilon_switch,
            full_enumeration: scenario.agent.full_enumeration,
            memory: SharedMemory::new(scenario.memory.clone()),
            activation: stream_rng(scenario.seed, Stream::Activation),
            failures: stream_rng(scenario.seed, Stream::Failures),
        }
    }

    pub fn potential(&self) -> f64 {
        potential(&self.graph, &self.joint, &self.demand, &self.params)
    }

    fn candidates(&self, node: NodeId) -> Vec<NodeAction> {
        let current = self
            .joint
            .get(node)
            .cloned()
            .unwrap_or_else(NodeAction::empty);
        if self.full_enumeration {
            full_action_space(&self.graph, node, &current, &self.contents[node])
        } else {
            move_neighborhood(&self.graph, node, &current, &self.contents[node])
        }
    }

    /// Asynchronous best response until a full sweep accepts nothing.
    pub fn converge(&mut self, max_activations: u64) -> Result<ConvergenceReport, EngineError> {
        let mut phi = self.potential();
        let mut trajectory = vec![phi];
        let (mut accepted, mut activations, mut sweeps) = (0u64, 0u64, 0u64);
        let mut strictly_decreasing = true;
        let mut slot = 0u64;
        loop {
            sweeps += 1;
            let mut order: Vec<NodeId> = self.graph.alive_nodes().collect();
            order.shuffle(&mut self.activation);
            let mut quiet = true;
            for node in order {
                if activations >= max_activations {
                    return Err(EngineError::BudgetExceeded { activations });
                }
                activations += 1;
                let table = RouteTable::build(&self.graph, &self.joint, &self.demand);
                let cands = self.candidates(node);
                let decision = best_response(
                    &cands,
                    |a| utility_oracle(&table, &self.graph, &self.joint, &self.params, node, a),
                    self.epsilon_switch,
                );
                if !decision.switched {
                    continue;
                }
                let view =
                    LocalView::new(&self.graph, &self.joint, &self.demand, table.loads(), node);
                let ctx = context_key(
                    &observe(&view),
                    self.graph.node(node).compute_capacity,
                    self.params.rho_max,
                );
                let class = Classifier::new(&view).classify(&cands[0], &decision.action);
                self.joint.set(node, decision.action);
                let next = self.potential();
                strictly_decreasing &= next < phi;
                phi = next;
                trajectory.push(phi);
                accepted += 1;
                quiet = false;
                self.memory.append_episode(EpisodeRecord {
                    agent: node,
                    context: ctx,
                    action: class,
                    delta: decision.value,
                    predicted: 0.0,
                    slot,
                });
                slot += 1;
            }
            if quiet {
                break;
            }
        }
        Ok(ConvergenceReport {
            trajectory,
            accepted,
            activations,
            sweeps,
            strictly_decreasing,
            certificate: self.certificate(),
        })
    }

    /// Evaluates every alternative of every alive node by full recomputation
    /// of the potential.
    pub fn certificate(&self) -> NashCertificate {
        let phi = self.potential();
        let mut cert = NashCertificate {
            passed: true,
            deviations_checked: 0,
            best_improvement: 0.0,
            violator: None,
        };
        for node in self.graph.alive_nodes() {
            for cand in self.candidates(node).into_iter().skip(1) {
                let d = potential(
                    &self.graph,
                    &self.joint.with(node, cand.clone()),
                    &self.demand,
                    &self.params,
                ) - phi;
                cert.deviations_checked += 1;
                if d < cert.best_improvement {
                    cert.best_improvement = d;
                    if d < -self.epsilon_switch {
                        cert.passed = false;
                        cert.violator = Some((node, cand));
                    }
                }
            }
        }
        cert
    }

    /// Permanently fails `nodes`; their demand leaves with them.
    pub fn fail_nodes(&mut self, nodes: &[NodeId]) -> Result<(), EngineError> {
        for &v in nodes {
            self.graph.fail_node(v)?;
            self.demand.zero_row(v);
        }
        self.joint.sanitize(&self.graph);
        Ok(())
    }

    /// Fails a random `fraction` of alive nodes from the failure stream.
    pub fn fail_random(
        &mut self,
        fraction: f64,
        preserve_connectivity: bool,
    ) -> Result<Vec<NodeId>, EngineError> {
        let victims = pick_failures(
            &self.graph,
            fraction,
            preserve_connectivity,
            &mut self.failures,
        );
        self.fail_nodes(&victims)?;
        Ok(victims)
    }
}

/// Random feasible placement: each node caches a random subset up to its
/// capacity and forwards to a random neighbor or the cloud.
pub fn random_joint<R: Rng>(graph: &FogGraph<f64>, contents: usize, rng: &mut R) -> JointAction {
    let mut joint = JointAction::empty_for(graph);
    for i in graph.alive_nodes() {
        let cap = graph.node(i).cache_capacity.min(contents);
        let size = rng.gen_range(0..=cap);
        let mut all: Vec<ContentId> = (0..contents).collect();
        all.shuffle(rng);
        let mut targets: Vec<Forward> = graph.neighbors(i).map(|(j, _)| Forward::Node(j)).collect();
        targets.push(Forward::Cloud);
        let forward = *targets.choose(rng).expect("cloud is always a target");
        joint.set(i, NodeAction::new(all.into_iter().take(size), forward));
    }
    joint
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    pub trials: u64,
    pub max_residual: f64,
    pub pair_trials: u64,
    pub max_pair_residual: f64,
    /// Identity deviations returned exactly zero on both sides.
    pub identity_exact: bool,
}

impl PotentialReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.identity_exact && self.max_residual < tolerance && self.max_pair_residual < tolerance
    }
}

/// Compares the oracle utility of random unilateral and pairwise
/// deviations against a double evaluation of the potential.
pub fn verify_exact_potential(
    scenario: &Scenario,
    trials: u64,
) -> Result<PotentialReport, EngineError> {
    scenario.validate()?;
    let graph: FogGraph<f64> = generate_mesh(&scenario.mesh(), scenario.seed)?;
    let demand = demand_snapshot(&scenario.workload, graph.len(), 0);
    let params = scenario.objective.params::<f64>();
    let contents = scenario.workload.catalog.size;
    let all: Vec<ContentId> = (0..contents).collect();
    let nodes: Vec<NodeId> = graph.alive_nodes().collect();
    let mut rng = stream_rng(scenario.seed, Stream::Verification);
    let mut report = PotentialReport {
        trials,
        max_residual: 0.0,
        pair_trials: 0,
        max_pair_residual: 0.0,
        identity_exact: true,
    };
    for _ in 0..trials {
        let joint = random_joint(&graph, contents, &mut rng);
        let table = RouteTable::build(&graph, &joint, &demand);
        let phi = table.evaluate(&graph, &joint, &params).value.scalar;
        let i = *nodes.choose(&mut rng).expect("alive nodes");
        let current = joint.get(i).cloned().expect("alive node has an action");
        let space = full_action_space(&graph, i, &current, &all);
        let cand = space.choose(&mut rng).expect("space holds current").clone();
        let du = utility_oracle(&table, &graph, &joint, &params, i, &cand);
        let dphi = potential(&graph, &joint.with(i, cand), &demand, &params) - phi;
        report.max_residual = report.max_residual.max((dphi - du).abs());

        let same = utility_oracle(&table, &graph, &joint, &params, i, &current);
        let phi_again = potential(&graph, &joint.with(i, current.clone()), &demand, &params);
        report.identity_exact &= same == 0.0 && phi_again - phi == 0.0;

        let peers: Vec<NodeId> = graph.neighbors(i).map(|(j, _)| j).collect();
        if let Some(&j) = peers.choose(&mut rng) {
            let ai = space.choose(&mut rng).expect("non-empty").clone();
            let cur_j = joint.get(j).cloned().expect("alive neighbor has an action");
            let aj = full_action_space(&graph, j, &cur_j, &all)
                .choose(&mut rng)
                .expect("non-empty")
                .clone();
            let mid = joint.with(i, ai.clone());
            let du_i = utility_oracle(&table, &graph, &joint, &params, i, &ai);
            let mid_table = RouteTable::build(&graph, &mid, &demand);
            let du_j = utility_oracle(&mid_table, &graph, &mid, &params, j, &aj);
            let dphi = potential(&graph, &mid.with(j, aj), &demand, &params) - phi;
            report.max_pair_residual = report.max_pair_residual.max((dphi - du_i - du_j).abs());
            report.pair_trials += 1;
        }
    }
    Ok(report)
}

/// Frozen-mode summary of one scenario: convergence, then optional failures
/// and re-convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub before: ConvergenceReport,
    pub failed: Vec<NodeId>,
    pub connected: bool,
    pub memory_unchanged: bool,
    pub after: ConvergenceReport,
    /// Relative potential change between the two fixed points.
    pub degradation: f64,
}

pub fn failure_stability(
    scenario: &Scenario,
    fraction: f64,
    max_activations: u64,
) -> Result<StabilityReport, EngineError> {
    let mut frozen = FrozenRun::new(scenario)?;
    let before = frozen.converge(max_activations)?;
    let snapshot = frozen.memory.clone();
    let failed = frozen.fail_random(fraction, true)?;
    let memory_unchanged = frozen.memory == snapshot;
    let connected = frozen.graph.is_connected();
    let after = frozen.converge(max_activations)?;
    let phi0 = before.phi_final();
    let degradation = (after.phi_final() - phi0) / phi0;
    Ok(StabilityReport {
        before,
        failed,
        connected,
        memory_unchanged,
        after,
        degradation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{IlpConfig, SolveMethod};
    use crate::scenario::{FailureEvent, RandomFailures};
    use crate::verify::tiny_instance;

    fn small(controller: Controller) -> Scenario {
        let mut s = Scenario::default();
        s.topology.nodes = 8;
        s.horizon = 200;
        s.workload.catalog.size = 12;
        s.workload.phases.truncate(2);
        s.workload.phases[1].start = 100;
        s.controller = controller;
        s
    }

    #[test]
    fn same_seed_same_log() {
        for c in Controller::ALL {
            let s = small(c);
            assert_eq!(run(&s).unwrap().events, run(&s).unwrap().events, "{c:?}");
        }
    }

    #[test]
    fn message_kinds_follow_the_controller() {
        let g = run(&small(Controller::Greedy)).unwrap().report;
        assert_eq!(g.messages.total(), 0);
        let s = small(Controller::Ilp);
        let i = run(&s).unwrap().report;
        assert_eq!(i.ilp_solves, s.horizon.div_ceil(s.baselines.period));
        assert_eq!(i.messages.ilp, 2 * 8 * i.ilp_solves);
        assert_eq!(i.messages.p2p + i.messages.mem, 0);
        let a = run(&small(Controller::Agentic)).unwrap().report;
        assert!(a.messages.p2p > 0 && a.messages.mem > 0 && a.messages.ilp == 0);
    }

    #[test]
    fn scheduled_failure_drops_the_node() {
        let mut s = small(Controller::Agentic);
        s.failures
            .scheduled
            .push(FailureEvent { slot: 50, node: 3 });
        let out = run(&s).unwrap();
        assert!(!out.graph.is_alive(3));
        assert!(out.joint.get(3).is_none());
        assert!(out
            .events
            .contains(&Event::NodeFailed { slot: 50, node: 3 }));
        assert_eq!(out.report.failed_nodes, vec![3]);
    }

    #[test]
    fn random_failures_keep_the_mesh_connected() {
        let mut s = small(Controller::Greedy);
        s.failures.random = Some(RandomFailures {
            slot: 20,
            fraction: 0.25,
            preserve_connectivity: true,
        });
        let out = run(&s).unwrap();
        assert_eq!(out.report.failed_nodes.len(), 2);
        assert!(out.graph.is_connected());
        assert!(!out.report.connectivity_lost);
    }

    #[test]
    fn frozen_run_reaches_certified_fixed_point() {
        let mut f = FrozenRun::new(&small(Controller::Agentic)).unwrap();
        let r = f.converge(10_000).unwrap();
        assert!(r.strictly_decreasing && r.certificate.passed);
        assert_eq!(r.trajectory.len() as u64, r.accepted + 1);
        let again = f.converge(10_000).unwrap();
        assert_eq!((again.accepted, again.sweeps), (0, 1));
    }

    #[test]
    fn global_optimum_is_a_fixed_point() {
        let cfg = IlpConfig {
            method: SolveMethod::Exhaustive,
            exhaustive_limit: f64::INFINITY,
            contents_per_node: None,
            ..IlpConfig::default()
        };
        let mut s = Scenario::default();
        s.agent.candidate_contents = None;
        for seed in 0..10 {
            let (graph, demand, params) = tiny_instance(seed);
            let inst = IlpInstance::new(graph.clone(), demand.clone(), params, None, 0);
            let opt = solve_ilp(&inst, &cfg).unwrap();
            let mut f = FrozenRun::from_parts(graph, demand, params, opt.joint, &s);
            assert_eq!(f.converge(1_000).unwrap().accepted, 0, "seed {seed}");
        }
    }

    #[test]
    fn failures_leave_memory_untouched() {
        let mut f = FrozenRun::new(&small(Controller::Agentic)).unwrap();
        f.converge(10_000).unwrap();
        let before = f.memory.clone();
        let victims = f.fail_random(0.25, true).unwrap();
        assert!(!victims.is_empty());
        assert_eq!(f.memory, before);
        assert!(victims.iter().all(|&v| f.joint.get(v).is_none()));
    }

    #[test]
    fn budget_exhaustion_is_an_error() {
        let mut f = FrozenRun::new(&small(Controller::Agentic)).unwrap();
        assert!(matches!(
            f.converge(1),
            Err(EngineError::BudgetExceeded { activations: 1 })
        ));
    }

    #[test]
    fn exact_potential_report_on_default_instance() {
        let mut s = Scenario::default();
        s.topology.nodes = 10;
        s.workload.catalog.size = 8;
        let r = verify_exact_potential(&s, 50).unwrap();
        assert!(r.passed(1e-9), "{r:?}");
        assert!(r.pair_trials > 0);
    }
}
