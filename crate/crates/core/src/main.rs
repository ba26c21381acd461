use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use agentic_fog::engine::{run, FrozenRun};
use agentic_fog::metrics::{read_records, write_events, write_records, RunRecord};
use agentic_fog::sweep::{aggregate, sweep, SweepSpec};
use agentic_fog::verify::{self, ACTIVATION_BUDGET};
use agentic_fog::Scenario;

#[derive(Parser)]
#[command(
    name = "agentic-fog",
    version,
    about = "Seeded fog caching and routing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its CSV row and JSONL event log.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Converge on the slot-0 demand snapshot with exact utilities.
        #[arg(long)]
        frozen: bool,
    },
    /// Run a sweep: N seeds per axis point and controller.
    Sweep {
        spec: PathBuf,
        /// First seed of the run series.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        frozen: bool,
    },
    /// Run the property suites on seeded default instances.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Turn every `<name>_runs.csv` in a results directory into a long
    /// `<name>_plot.csv` (controller, axis_value, metric, mean, std).
    Figures {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            scenario,
            seed,
            out,
            frozen,
        } => run_one(&scenario, seed, &out, frozen).map(|_| true),
        Command::Sweep {
            spec,
            seed,
            out,
            jobs,
            frozen,
        } => run_sweep(&spec, seed, &out, jobs, frozen).map(|_| true),
        Command::Verify { seed } => {
            let mut ok = true;
            for r in verify::all(seed) {
                println!("{r}");
                ok &= r.passed;
            }
            Ok(ok)
        }
        Command::Figures { results, out } => {
            figures(&results, out.as_deref().unwrap_or(&results)).map(|_| true)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run_one(path: &Path, seed: Option<u64>, out: &Path, frozen: bool) -> Result<()> {
    let mut scenario =
        Scenario::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    fs::create_dir_all(out)?;
    let stem = format!(
        "{}_{}_{}",
        scenario.name,
        scenario.controller.name(),
        scenario.seed
    );
    if frozen {
        let mut run = FrozenRun::new(&scenario)?;
        let report = run.converge(ACTIVATION_BUDGET)?;
        println!(
            "fixed point after {} activations ({} sweeps, {} accepted), phi {:.6}, certificate {}",
            report.activations,
            report.sweeps,
            report.accepted,
            report.phi_final(),
            if report.certificate.passed {
                "passed"
            } else {
                "FAILED"
            }
        );
        let file = out.join(format!("{stem}_frozen.json"));
        fs::write(&file, serde_json::to_string_pretty(&report)?)?;
        if !report.certificate.passed {
            bail!("Nash certificate failed");
        }
        return Ok(());
    }
    let output = run(&scenario)?;
    let r = &output.report;
    let record = RunRecord::from_report(r, 0.0);
    write_records(
        &[record],
        fs::File::create(out.join(format!("{stem}.csv")))?,
    )?;
    write_events(
        &output.events,
        fs::File::create(out.join(format!("{stem}.jsonl")))?,
    )?;
    println!(
        "{} seed {}: mean latency {:.4}, p95 {:.4}, adaptation {}, {:.2} msgs/slot, phi {:.4}",
        scenario.controller.name(),
        scenario.seed,
        r.mean_latency,
        r.p95_latency,
        r.adaptation_time()
            .map_or("n/a".into(), |a| format!("{a:.1}")),
        r.messages_per_slot,
        r.phi_final
    );
    Ok(())
}

fn run_sweep(path: &Path, seed: Option<u64>, out: &Path, jobs: usize, frozen: bool) -> Result<()> {
    let mut spec = SweepSpec::from_json(&read(path)?)
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        spec.first_seed = s;
    }
    spec.frozen |= frozen;
    let output = sweep(&spec, jobs)?;
    output.write(out, &spec.name)?;
    for row in &output.aggregate {
        let m = |s: agentic_fog::sweep::Stat| s.mean.map_or("-".into(), |v| format!("{v:.4}"));
        println!(
            "{:8} {}={:<6} latency {} adaptation {} phi {} sweeps {}",
            row.controller,
            spec.axis.name(),
            row.axis_value,
            m(row.mean_latency),
            m(row.adaptation_time),
            m(row.phi_final),
            m(row.sweeps_to_converge)
        );
    }
    Ok(())
}

fn figures(results: &Path, out: &Path) -> Result<()> {
    let mut found = 0;
    let mut entries: Vec<PathBuf> = fs::read_dir(results)
        .with_context(|| format!("listing {}", results.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    fs::create_dir_all(out)?;
    for path in entries {
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix("_runs.csv"))
        else {
            continue;
        };
        let records = read_records(fs::File::open(&path)?)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut w = csv::Writer::from_path(out.join(format!("{stem}_plot.csv")))?;
        w.write_record(["controller", "axis_value", "metric", "mean", "std", "n"])?;
        for row in aggregate(&records) {
            for (metric, s) in [
                ("mean_latency", row.mean_latency),
                ("p95_latency", row.p95_latency),
                ("adaptation_time", row.adaptation_time),
                ("degradation", row.degradation),
                (
                    "msgs_per_run",
                    agentic_fog::sweep::Stat::of(
                        records
                            .iter()
                            .filter(|r| {
                                r.controller == row.controller && r.axis_value == row.axis_value
                            })
                            .map(|r| (r.msgs_p2p + r.msgs_mem + r.msgs_ilp) as f64),
                    ),
                ),
                ("sweeps_to_converge", row.sweeps_to_converge),
                ("phi_final", row.phi_final),
            ] {
                if let (Some(mean), Some(std)) = (s.mean, s.std) {
                    w.write_record([
                        row.controller.clone(),
                        row.axis_value.to_string(),
                        metric.into(),
                        mean.to_string(),
                        std.to_string(),
                        s.n.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        found += 1;
    }
    if found == 0 {
        bail!("no *_runs.csv files in {}", results.display());
    }
    println!("wrote {found} plot table(s) to {}", out.display());
    Ok(())
}
