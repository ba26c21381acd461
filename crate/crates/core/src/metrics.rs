//! Run metrics as pure folds over the event log, plus the fixed CSV schema.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::SolveStatus;
use crate::objective::Component;
use crate::topology::NodeId;

/// Bumped whenever a CSV column is added, removed or reordered.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(
        "series of {len} slots is too short for shift at {shift} (needs {needed} post-shift slots)"
    )]
    SeriesTooShort {
        len: usize,
        shift: u64,
        needed: usize,
    },
    #[error("baseline latency is zero")]
    ZeroBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Leading fraction of the horizon excluded from steady-state figures.
    pub warmup_fraction: f64,
    /// Moving-average window for adaptation time.
    pub window: usize,
    /// Relative band around the post-shift steady state.
    pub band: f64,
    /// Consecutive slots the moving average must stay inside the band.
    pub hold: usize,
    /// Slot width of the per-window latency table.
    pub report_window: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.1,
            window: 20,
            band: 0.05,
            hold: 50,
            report_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Slot {
        slot: u64,
        /// Demand-weighted latency of the current joint action under true rates.
        expected_latency: f64,
        phi: f64,
        latency_sum: f64,
        requests: u64,
        msgs_p2p: u64,
        msgs_mem: u64,
        msgs_ilp: u64,
        moves: u64,
        task_failures: u64,
    },
    Coordination {
        slot: u64,
        exchanges: u64,
        conflicts: usize,
        changes: usize,
    },
    Guidance {
        slot: u64,
        ranking: Vec<Component>,
    },
    IlpSolve {
        slot: u64,
        value: f64,
        status: SolveStatus,
        explored: u64,
    },
    NodeFailed {
        slot: u64,
        node: NodeId,
    },
    ConnectivityLost {
        slot: u64,
        components: usize,
    },
}

pub fn write_events<W: Write>(events: &[Event], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> io::Result<Vec<Event>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l.and_then(|l| serde_json::from_str(&l).map_err(io::Error::other)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MessageCounts {
    pub p2p: u64,
    pub mem: u64,
    pub ilp: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.p2p + self.mem + self.ilp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub start: u64,
    pub end: u64,
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStat {
    pub shift: u64,
    /// `None` when the latency never settled.
    pub slots: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCounts {
    pub activations: u64,
    pub sweeps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario_hash: String,
    pub controller: String,
    pub seed: u64,
    pub horizon: u64,
    pub shifts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    /// Mean sampled request latency after warm-up.
    pub mean_latency: f64,
    /// 95th percentile of per-slot mean sampled latency after warm-up.
    pub p95_latency: f64,
    pub windows: Vec<WindowStat>,
    pub adaptation: Vec<AdaptationStat>,
    pub messages: MessageCounts,
    pub messages_per_slot: f64,
    pub requests: u64,
    pub moves: u64,
    pub task_failures: u64,
    pub failed_nodes: Vec<NodeId>,
    pub connectivity_lost: bool,
    pub ilp_solves: u64,
    pub expected_latency: Vec<f64>,
    pub phi_trace: Vec<f64>,
    pub phi_final: f64,
}

impl MetricsReport {
    /// Mean adaptation over shifts that settled.
    pub fn adaptation_time(&self) -> Option<f64> {
        let settled: Vec<f64> = self
            .adaptation
            .iter()
            .filter_map(|a| a.slots.map(|s| s as f64))
            .collect();
        (!settled.is_empty()).then(|| settled.iter().sum::<f64>() / settled.len() as f64)
    }

    /// Folds an event log into a report.
    pub fn from_events(meta: RunMeta, events: &[Event], config: &MetricsConfig) -> Self {
        let warmup = (config.warmup_fraction * meta.horizon as f64).ceil() as u64;
        let mut per_slot: Vec<(u64, f64, u64)> = Vec::new();
        let mut expected_latency = Vec::new();
        let mut phi_trace = Vec::new();
        let mut messages = MessageCounts::default();
        let (mut requests, mut moves, mut task_failures, mut ilp_solves) = (0, 0, 0, 0);
        let mut failed_nodes = Vec::new();
        let mut connectivity_lost = false;
        let (mut lat_sum, mut lat_n) = (0.0, 0u64);
        for e in events {
            match e {
                Event::Slot {
                    slot,
                    expected_latency: el,
                    phi,
                    latency_sum,
                    requests: r,
                    msgs_p2p,
                    msgs_mem,
                    msgs_ilp,
                    moves: m,
                    task_failures: f,
                } => {
                    expected_latency.push(*el);
                    phi_trace.push(*phi);
                    messages.p2p += msgs_p2p;
                    messages.mem += msgs_mem;
                    messages.ilp += msgs_ilp;
                    requests += r;
                    moves += m;
                    task_failures += f;
                    per_slot.push((*slot, *latency_sum, *r));
                    if *slot >= warmup {
                        lat_sum += latency_sum;
                        lat_n += r;
                    }
                }
                Event::IlpSolve { .. } => ilp_solves += 1,
                Event::NodeFailed { node, .. } => failed_nodes.push(*node),
                Event::ConnectivityLost { .. } => connectivity_lost = true,
                Event::Coordination { .. } | Event::Guidance { .. } => {}
            }
        }
        let steady: Vec<f64> = per_slot
            .iter()
            .filter(|s| s.0 >= warmup && s.2 > 0)
            .map(|s| s.1 / s.2 as f64)
            .collect();
        let mut windows = Vec::new();
        let width = config.report_window.max(1);
        let mut start = 0;
        while start < per_slot.len() as u64 {
            let end = (start + width).min(per_slot.len() as u64);
            let chunk = &per_slot[start as usize..end as usize];
            let (s, n) = chunk
                .iter()
                .fold((0.0, 0u64), |acc, x| (acc.0 + x.1, acc.1 + x.2));
            let means: Vec<f64> = chunk
                .iter()
                .filter(|x| x.2 > 0)
                .map(|x| x.1 / x.2 as f64)
                .collect();
            windows.push(WindowStat {
                start,
                end,
                mean: if n > 0 { s / n as f64 } else { 0.0 },
                p95: percentile(&means, 0.95),
            });
            start = end;
        }
        let adaptation = meta
            .shifts
            .iter()
            .filter(|&&s| s < expected_latency.len() as u64)
            .map(|&shift| AdaptationStat {
                shift,
                slots: adaptation_time_in(&expected_latency, shift, &meta.shifts, config)
                    .ok()
                    .flatten(),
            })
            .collect();
        let slots = per_slot.len() as f64;
        Self {
            mean_latency: if lat_n > 0 {
                lat_sum / lat_n as f64
            } else {
                0.0
            },
            p95_latency: percentile(&steady, 0.95),
            windows,
            adaptation,
            messages_per_slot: if slots > 0.0 {
                messages.total() as f64 / slots
            } else {
                0.0
            },
            messages,
            requests,
            moves,
            task_failures,
            failed_nodes,
            connectivity_lost,
            ilp_solves,
            phi_final: phi_trace.last().copied().unwrap_or(0.0),
            expected_latency,
            phi_trace,
            meta,
        }
    }
}

/// Nearest-rank percentile; 0 for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn adaptation_time_in(
    series: &[f64],
    shift: u64,
    shifts: &[u64],
    config: &MetricsConfig,
) -> Result<Option<u64>, MetricsError> {
    let end = shifts
        .iter()
        .copied()
        .find(|&s| s > shift)
        .map_or(series.len(), |s| (s as usize).min(series.len()));
    adaptation_time(
        &series[..end],
        shift,
        config.window,
        config.band,
        config.hold,
    )
}

/// Slots after `shift` until the trailing moving average (width `window`)
/// first stays within `band` (relative) of the post-shift steady state for
/// `hold` consecutive slots. The steady state is the mean of the second
/// half of the post-shift series. `None` if that never happens.
pub fn adaptation_time(
    series: &[f64],
    shift: u64,
    window: usize,
    band: f64,
    hold: usize,
) -> Result<Option<u64>, MetricsError> {
    let shift_idx = shift as usize;
    let needed = window.max(hold).max(2);
    if shift_idx >= series.len() || series.len() - shift_idx < needed {
        return Err(MetricsError::SeriesTooShort {
            len: series.len(),
            shift,
            needed,
        });
    }
    let post = &series[shift_idx..];
    let tail = &post[post.len() / 2..];
    let steady = tail.iter().sum::<f64>() / tail.len() as f64;
    let tol = band * steady.abs();
    let window = window.max(1);
    let ma = |s: usize| {
        let lo = (s + 1).saturating_sub(window);
        let w = &series[lo..=s];
        w.iter().sum::<f64>() / w.len() as f64
    };
    let inside: Vec<bool> = (shift_idx..series.len())
        .map(|s| (ma(s) - steady).abs() <= tol)
        .collect();
    let mut run = 0usize;
    for (k, &ok) in inside.iter().enumerate() {
        run = if ok { run + 1 } else { 0 };
        if run >= hold.max(1) {
            return Ok(Some((k + 1 - run) as u64));
        }
    }
    Ok(None)
}

/// Relative latency degradation of a run with failures against one without.
pub fn resilience(with_failures: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok((with_failures - baseline) / baseline)
}

/// One CSV row per run; column order is part of the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario_hash: String,
    pub controller: String,
    pub seed: u64,
    pub axis_value: f64,
    pub mean_latency: f64,
    pub p95_latency: f64,
    pub adaptation_time: Option<f64>,
    pub degradation: Option<f64>,
    pub msgs_p2p: u64,
    pub msgs_mem: u64,
    pub msgs_ilp: u64,
    pub sweeps_to_converge: Option<u64>,
    pub activations_to_converge: Option<u64>,
    pub phi_final: f64,
    pub schema_version: u32,
}

pub const RUN_COLUMNS: [&str; 15] = [
    "scenario_hash",
    "controller",
    "seed",
    "axis_value",
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
    "schema_version",
];

impl RunRecord {
    pub fn from_report(report: &MetricsReport, axis_value: f64) -> Self {
        Self {
            scenario_hash: report.meta.scenario_hash.clone(),
            controller: report.meta.controller.clone(),
            seed: report.meta.seed,
            axis_value,
            mean_latency: report.mean_latency,
            p95_latency: report.p95_latency,
            adaptation_time: report.adaptation_time(),
            degradation: None,
            msgs_p2p: report.messages.p2p,
            msgs_mem: report.messages.mem,
            msgs_ilp: report.messages.ilp,
            sweeps_to_converge: None,
            activations_to_converge: None,
            phi_final: report.phi_final,
            schema_version: SCHEMA_VERSION,
        }
    }
}

pub fn write_records<W: Write>(records: &[RunRecord], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(RUN_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: io::Read>(input: R) -> csv::Result<Vec<RunRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
