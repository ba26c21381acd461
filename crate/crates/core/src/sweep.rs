//! Parameter sweeps: N seeded runs per axis point and controller, folded
//! into mean/std rows.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run, EngineError, FrozenRun};
use crate::metrics::{write_events, write_records, RunRecord, SCHEMA_VERSION};
use crate::objective::RouteTable;
use crate::scenario::{Controller, RandomFailures, Scenario, ScenarioError};

pub const MIN_RUNS: usize = 10;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("point {axis}={value} controller {controller} seed {seed}: {source}")]
    Run {
        axis: &'static str,
        value: f64,
        controller: &'static str,
        seed: u64,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// One point; the per-window latency table carries the time axis.
    Time,
    NodeCount,
    MemorySize,
    CoordinationInterval,
    FailureRate,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Time => "time",
            Axis::NodeCount => "node_count",
            Axis::MemorySize => "memory_size",
            Axis::CoordinationInterval => "coordination_interval",
            Axis::FailureRate => "failure_rate",
        }
    }

    fn defaults(self) -> Vec<f64> {
        match self {
            Axis::Time => vec![0.0],
            Axis::NodeCount => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            Axis::MemorySize => vec![20.0, 40.0, 60.0, 80.0, 100.0],
            Axis::CoordinationInterval => vec![1.0, 5.0, 10.0, 20.0],
            Axis::FailureRate => vec![0.1, 0.2, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default)]
    pub template: Scenario,
    pub axis: Axis,
    /// Empty means the axis defaults.
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "all_controllers")]
    pub controllers: Vec<Controller>,
    #[serde(default = "min_runs")]
    pub runs: usize,
    #[serde(default = "first_seed")]
    pub first_seed: u64,
    /// Failure slot for the failure-rate axis; half the horizon if unset.
    #[serde(default)]
    pub failure_slot: Option<u64>,
    /// Frozen convergence instead of full runs (agentic only).
    #[serde(default)]
    pub frozen: bool,
    #[serde(default = "activation_budget")]
    pub max_activations: u64,
}

fn all_controllers() -> Vec<Controller> {
    Controller::ALL.to_vec()
}

fn min_runs() -> usize {
    MIN_RUNS
}

fn first_seed() -> u64 {
    1
}

fn activation_budget() -> u64 {
    100_000
}

impl SweepSpec {
    pub fn new(name: &str, template: Scenario, axis: Axis) -> Self {
        Self {
            name: name.into(),
            template,
            axis,
            values: Vec::new(),
            controllers: all_controllers(),
            runs: MIN_RUNS,
            first_seed: 1,
            failure_slot: None,
            frozen: false,
            max_activations: activation_budget(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SweepError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn values(&self) -> Vec<f64> {
        if self.values.is_empty() {
            self.axis.defaults()
        } else {
            self.values.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Invalid(m));
        if self.runs < MIN_RUNS {
            return bad(format!(
                "runs = {} but at least {MIN_RUNS} are required per point",
                self.runs
            ));
        }
        if self.controllers.is_empty() {
            return bad("no controllers".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("sweep name {:?} is not a file stem", self.name));
        }
        for v in self.values() {
            let whole = v >= 1.0 && v.fract() == 0.0;
            let ok = match self.axis {
                Axis::Time => true,
                Axis::NodeCount | Axis::CoordinationInterval => whole,
                Axis::MemorySize => v >= 0.0 && v.fract() == 0.0,
                Axis::FailureRate => (0.0..1.0).contains(&v),
            };
            if !ok {
                return bad(format!("{} value {v} out of range", self.axis.name()));
            }
        }
        if self.frozen && self.axis == Axis::FailureRate {
            return bad("frozen sweeps do not take a failure-rate axis".into());
        }
        for v in self.values() {
            self.scenario_at(v, self.template.controller, self.first_seed)
                .validate()?;
        }
        Ok(())
    }

    /// The template with the axis value, controller and seed applied.
    pub fn scenario_at(&self, value: f64, controller: Controller, seed: u64) -> Scenario {
        let mut s = self.template.clone();
        s.seed = seed;
        s.controller = controller;
        match self.axis {
            Axis::Time => {}
            Axis::NodeCount => s.topology.nodes = value as usize,
            Axis::MemorySize => s.memory.capacity = value as usize,
            Axis::CoordinationInterval => s.coordination.interval = value as u64,
            Axis::FailureRate => {
                if value > 0.0 {
                    s.failures.random = Some(RandomFailures {
                        slot: self.failure_slot(),
                        fraction: value,
                        preserve_connectivity: true,
                    });
                }
            }
        }
        s
    }

    fn failure_slot(&self) -> u64 {
        self.failure_slot.unwrap_or(self.template.horizon / 2)
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.runs as u64).map(move |k| self.first_seed + k)
    }

    fn controllers(&self) -> Vec<Controller> {
        if self.frozen {
            vec![Controller::Agentic]
        } else {
            self.controllers.clone()
        }
    }
}

/// Mean and sample standard deviation of one metric; `n` counts present values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                n,
                mean: None,
                std: None,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean: Some(mean),
            std: Some(std),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub controller: String,
    pub axis_value: f64,
    pub runs: usize,
    pub mean_latency: Stat,
    pub p95_latency: Stat,
    pub adaptation_time: Stat,
    pub degradation: Stat,
    pub msgs_p2p: Stat,
    pub msgs_mem: Stat,
    pub msgs_ilp: Stat,
    pub sweeps_to_converge: Stat,
    pub activations_to_converge: Stat,
    pub phi_final: Stat,
}

const METRICS: [&str; 10] = [
    "mean_latency",
    "p95_latency",
    "adaptation_time",
    "degradation",
    "msgs_p2p",
    "msgs_mem",
    "msgs_ilp",
    "sweeps_to_converge",
    "activations_to_converge",
    "phi_final",
];

impl AggregateRow {
    fn stats(&self) -> [&Stat; 10] {
        [
            &self.mean_latency,
            &self.p95_latency,
            &self.adaptation_time,
            &self.degradation,
            &self.msgs_p2p,
            &self.msgs_mem,
            &self.msgs_ilp,
            &self.sweeps_to_converge,
            &self.activations_to_converge,
            &self.phi_final,
        ]
    }

    pub fn header() -> Vec<String> {
        let mut h = vec!["controller".to_string(), "axis_value".into(), "runs".into()];
        for m in METRICS {
            h.push(format!("{m}_mean"));
            h.push(format!("{m}_std"));
        }
        h.push("schema_version".into());
        h
    }
}

/// Groups records by (controller, axis value) in first-seen order.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in records {
        if !keys
            .iter()
            .any(|k| k.0 == r.controller && k.1 == r.axis_value)
        {
            keys.push((r.controller.clone(), r.axis_value));
        }
    }
    keys.into_iter()
        .map(|(controller, axis_value)| {
            let g: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.controller == controller && r.axis_value == axis_value)
                .collect();
            let of =
                |f: &dyn Fn(&RunRecord) -> Option<f64>| Stat::of(g.iter().filter_map(|r| f(r)));
            AggregateRow {
                runs: g.len(),
                mean_latency: of(&|r| Some(r.mean_latency)),
                p95_latency: of(&|r| Some(r.p95_latency)),
                adaptation_time: of(&|r| r.adaptation_time),
                degradation: of(&|r| r.degradation),
                msgs_p2p: of(&|r| Some(r.msgs_p2p as f64)),
                msgs_mem: of(&|r| Some(r.msgs_mem as f64)),
                msgs_ilp: of(&|r| Some(r.msgs_ilp as f64)),
                sweeps_to_converge: of(&|r| r.sweeps_to_converge.map(|x| x as f64)),
                activations_to_converge: of(&|r| r.activations_to_converge.map(|x| x as f64)),
                phi_final: of(&|r| Some(r.phi_final)),
                controller,
                axis_value,
            }
        })
        .collect()
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AggregateRow::header())?;
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.controller.clone(),
            r.axis_value.to_string(),
            r.runs.to_string(),
        ];
        for s in r.stats() {
            rec.push(cell(s.mean));
            rec.push(cell(s.std));
        }
        rec.push(SCHEMA_VERSION.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-window latency averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub controller: String,
    pub axis_value: f64,
    pub start: u64,
    pub end: u64,
    pub latency_mean: f64,
    pub latency_std: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub record: RunRecord,
    /// (start, end, mean latency) per report window; empty for frozen runs.
    pub windows: Vec<(u64, u64, f64)>,
    /// Event log as JSONL; empty for frozen runs.
    pub events: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
    pub windows: Vec<WindowRow>,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    value: f64,
    controller: Controller,
    seed: u64,
}

/// Runs every (value, controller, seed) job on a pool of `jobs` workers.
/// Output order is fixed by the job list, never by completion order.
pub fn sweep(spec: &SweepSpec, jobs: usize) -> Result<SweepOutput, SweepError> {
    spec.validate()?;
    let controllers = spec.controllers();
    let mut list = Vec::new();
    for value in spec.values() {
        for &controller in &controllers {
            for seed in spec.seeds() {
                list.push(Job {
                    value,
                    controller,
                    seed,
                });
            }
        }
    }
    let failure_axis = spec.axis == Axis::FailureRate;
    let mut baselines: Vec<Job> = Vec::new();
    if failure_axis {
        for &controller in &controllers {
            for seed in spec.seeds() {
                baselines.push(Job {
                    value: 0.0,
                    controller,
                    seed,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    let (runs, base) = pool.install(|| {
        let runs: Result<Vec<RunResult>, SweepError> =
            list.par_iter().map(|j| run_job(spec, *j)).collect();
        let base: Result<Vec<RunResult>, SweepError> =
            baselines.par_iter().map(|j| run_job(spec, *j)).collect();
        (runs, base)
    });
    let mut runs = runs?;
    let base = base?;
    if failure_axis {
        let from = spec.failure_slot();
        for r in &mut runs {
            let b = base
                .iter()
                .find(|b| {
                    b.record.controller == r.record.controller && b.record.seed == r.record.seed
                })
                .expect("baseline per controller and seed");
            let with = tail_latency(&r.windows, from);
            let without = tail_latency(&b.windows, from);
            r.record.degradation = crate::metrics::resilience(with, without).ok();
        }
    }
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let aggregate = aggregate(&records);
    let windows = window_rows(&runs);
    Ok(SweepOutput {
        runs,
        aggregate,
        windows,
    })
}

/// Mean of the window means that start at or after `from`.
fn tail_latency(windows: &[(u64, u64, f64)], from: u64) -> f64 {
    let tail: Vec<f64> = windows
        .iter()
        .filter(|w| w.0 >= from)
        .map(|w| w.2)
        .collect();
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn window_rows(runs: &[RunResult]) -> Vec<WindowRow> {
    let mut out: Vec<WindowRow> = Vec::new();
    let mut seen: Vec<(String, f64)> = Vec::new();
    for r in runs {
        let key = (r.record.controller.clone(), r.record.axis_value);
        if r.windows.is_empty() || seen.contains(&key) {
            continue;
        }
        let group: Vec<&RunResult> = runs
            .iter()
            .filter(|x| x.record.controller == key.0 && x.record.axis_value == key.1)
            .collect();
        for (k, &(start, end, _)) in r.windows.iter().enumerate() {
            let s = Stat::of(group.iter().filter_map(|g| g.windows.get(k).map(|w| w.2)));
            out.push(WindowRow {
                controller: key.0.clone(),
                axis_value: key.1,
                start,
                end,
                latency_mean: s.mean.unwrap_or(0.0),
                latency_std: s.std.unwrap_or(0.0),
            });
        }
        seen.push(key);
    }
    out
}

fn run_job(spec: &SweepSpec, job: Job) -> Result<RunResult, SweepError> {
    let scenario = spec.scenario_at(job.value, job.controller, job.seed);
    let fail = |source| SweepError::Run {
        axis: spec.axis.name(),
        value: job.value,
        controller: job.controller.name(),
        seed: job.seed,
        source,
    };
    if spec.frozen {
        let mut frozen = FrozenRun::new(&scenario).map_err(fail)?;
        let report = frozen.converge(spec.max_activations).map_err(fail)?;
        let table = RouteTable::build(&frozen.graph, &frozen.joint, &frozen.demand);
        let value = table
            .evaluate(&frozen.graph, &frozen.joint, &frozen.params)
            .value;
        let record = RunRecord {
            scenario_hash: scenario.hash(),
            controller: job.controller.name().into(),
            seed: job.seed,
            axis_value: job.value,
            mean_latency: value.latency,
            p95_latency: value.latency,
            adaptation_time: None,
            degradation: None,
            msgs_p2p: 0,
            msgs_mem: 0,
            msgs_ilp: 0,
            sweeps_to_converge: Some(report.sweeps),
            activations_to_converge: Some(report.activations),
            phi_final: report.phi_final(),
            schema_version: SCHEMA_VERSION,
        };
        return Ok(RunResult {
            record,
            windows: Vec::new(),
            events: Vec::new(),
        });
    }
    let out = run(&scenario).map_err(fail)?;
    let record = RunRecord::from_report(&out.report, job.value);
    let windows = out
        .report
        .windows
        .iter()
        .map(|w| (w.start, w.end, w.mean))
        .collect();
    let mut events = Vec::new();
    write_events(&out.events, &mut events)?;
    Ok(RunResult {
        record,
        windows,
        events,
    })
}

impl SweepOutput {
    /// `<name>.csv` (aggregate), `<name>_runs.csv`, `<name>_windows.csv`
    /// and one JSONL log per run under `<name>_events/`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<(), SweepError> {
        fs::create_dir_all(dir)?;
        write_aggregate(
            &self.aggregate,
            fs::File::create(dir.join(format!("{name}.csv")))?,
        )?;
        let records: Vec<RunRecord> = self.runs.iter().map(|r| r.record.clone()).collect();
        write_records(
            &records,
            fs::File::create(dir.join(format!("{name}_runs.csv")))?,
        )?;
        let mut w = csv::Writer::from_path(dir.join(format!("{name}_windows.csv")))?;
        for row in &self.windows {
            w.serialize(row)?;
        }
        w.flush()?;
        let events = dir.join(format!("{name}_events"));
        if self.runs.iter().any(|r| !r.events.is_empty()) {
            fs::create_dir_all(&events)?;
        }
        for r in self.runs.iter().filter(|r| !r.events.is_empty()) {
            let file = format!(
                "{}_{}_{}.jsonl",
                r.record.controller, r.record.axis_value, r.record.seed
            );
            fs::write(events.join(file), &r.events)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::read_records;

    fn tiny_template() -> Scenario {
        let mut s = Scenario::default();
        s.topology.nodes = 6;
        s.horizon = 120;
        s.workload.catalog.size = 8;
        s.workload.phases.truncate(1);
        s.baselines.period = 40;
        s
    }

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.n, 4);
        assert_eq!(s.mean, Some(2.5));
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of([7.0]).std, Some(0.0));
        assert_eq!(Stat::of([]).mean, None);
    }

    #[test]
    fn fewer_than_ten_runs_rejected() {
        let mut spec = SweepSpec::new("x", tiny_template(), Axis::MemorySize);
        spec.runs = 9;
        assert!(spec.validate().is_err());
        spec.runs = 10;
        spec.validate().unwrap();
    }

    #[test]
    fn axis_values_checked() {
        let mut spec = SweepSpec::new("x", tiny_template(), Axis::FailureRate);
        spec.values = vec![1.5];
        assert!(spec.validate().is_err());
        let mut spec = SweepSpec::new("x", tiny_template(), Axis::NodeCount);
        spec.values = vec![2.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn axis_applies_to_template() {
        let spec = SweepSpec::new("x", tiny_template(), Axis::NodeCount);
        let s = spec.scenario_at(12.0, Controller::Greedy, 4);
        assert_eq!(
            (s.topology.nodes, s.seed, s.controller),
            (12, 4, Controller::Greedy)
        );
        let spec = SweepSpec::new("x", tiny_template(), Axis::FailureRate);
        let s = spec.scenario_at(0.2, Controller::Agentic, 1);
        assert_eq!(s.failures.random.unwrap().slot, 60);
        assert!(spec
            .scenario_at(0.0, Controller::Agentic, 1)
            .failures
            .random
            .is_none());
    }

    #[test]
    fn spec_json_takes_defaults() {
        let spec = SweepSpec::from_json(r#"{"name": "mem", "axis": "memory_size"}"#).unwrap();
        assert_eq!(spec.runs, 10);
        assert_eq!(spec.values(), vec![20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(spec.controllers, Controller::ALL.to_vec());
    }

    #[test]
    fn aggregation_equals_recomputation_from_csv() {
        let mut spec = SweepSpec::new("agg", tiny_template(), Axis::MemorySize);
        spec.values = vec![10.0, 30.0];
        spec.controllers = vec![Controller::Greedy, Controller::Agentic];
        let out = sweep(&spec, 2).unwrap();
        assert_eq!(out.runs.len(), 40);
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path(), "agg").unwrap();
        let back = read_records(fs::File::open(dir.path().join("agg_runs.csv")).unwrap()).unwrap();
        assert_eq!(aggregate(&back), out.aggregate);
        let mut buf = Vec::new();
        write_aggregate(&aggregate(&back), &mut buf).unwrap();
        assert_eq!(buf, fs::read(dir.path().join("agg.csv")).unwrap());
        assert_eq!(
            fs::read_dir(dir.path().join("agg_events")).unwrap().count(),
            40
        );
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let mut spec = SweepSpec::new("w", tiny_template(), Axis::Time);
        spec.controllers = vec![Controller::Greedy];
        let a = sweep(&spec, 1).unwrap();
        let b = sweep(&spec, 3).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
        assert_eq!(a.windows, b.windows);
    }

    #[test]
    fn failure_axis_reports_degradation() {
        let mut spec = SweepSpec::new("f", tiny_template(), Axis::FailureRate);
        spec.values = vec![0.3];
        spec.controllers = vec![Controller::Greedy];
        let out = sweep(&spec, 1).unwrap();
        assert!(out
            .runs
            .iter()
            .all(|r| r.record.degradation.is_some_and(f64::is_finite)));
    }

    #[test]
    fn frozen_sweep_counts_sweeps() {
        let mut spec = SweepSpec::new("fz", tiny_template(), Axis::NodeCount);
        spec.values = vec![6.0];
        spec.frozen = true;
        let out = sweep(&spec, 1).unwrap();
        assert_eq!(out.aggregate.len(), 1);
        assert_eq!(out.aggregate[0].controller, "agentic");
        assert!(out
            .runs
            .iter()
            .all(|r| r.record.sweeps_to_converge.is_some_and(|s| s >= 1)));
    }
}
