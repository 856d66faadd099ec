//! Scenario runner: execute, validate, and sweep simulation scenarios, and
//! render metric series to charts.
//!
//! Exit codes: 0 success, 1 usage error, 2 scenario error.

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ads_core::metrics;
use ads_core::scenario::{self, Scenario, ScenarioError};
use ads_core::simkernel::SimTime;
use ads_core::Simulation;

#[derive(Parser)]
#[command(name = "ads", version, about = "Information-market directory service simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, writing the trace and metrics.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write metrics (summary + time series) to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Parse and validate a scenario file.
    Validate { scenario: PathBuf },
    /// Run the scenario once per value of a swept parameter and print a
    /// metrics table.
    Sweep {
        scenario: PathBuf,
        /// Sweep specification, e.g. --param t_heartbeat=10,30,60
        #[arg(long)]
        param: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the series of a metrics file to SVG charts.
    Plot {
        metrics: PathBuf,
        /// Output directory for the chart files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Scenario(e)) => {
            eprintln!("scenario error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Scenario(ScenarioError),
    Other(anyhow::Error),
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Scenario(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { scenario, seed, trace, metrics } => run(&scenario, seed, trace, metrics),
        Command::Validate { scenario } => {
            scenario::load(&scenario)?;
            println!("ok");
            Ok(())
        }
        Command::Sweep { scenario, param, seed } => sweep(&scenario, &param, seed),
        Command::Plot { metrics, out_dir } => plot(&metrics, &out_dir),
    }
}

fn run(
    path: &Path,
    seed: Option<u64>,
    trace_path: Option<PathBuf>,
    metrics_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let sc = scenario::load(path)?;
    let mut sim = Simulation::from_scenario(&sc, seed)?;
    sim.run();
    let m = metrics::compute(sim.trace(), sim.horizon());
    if let Some(p) = trace_path {
        std::fs::write(&p, sim.trace().render())?;
    }
    if let Some(p) = metrics_path {
        std::fs::write(&p, metrics::render(&m))?;
    }
    println!(
        "horizon {} | published {} acked {} lost {} | survival {:.3} | queries sync {} async {} | recall {:.3} precision {:.3} | imm created {} handoffs {} elections {}",
        m.horizon,
        m.published,
        m.acked,
        m.lost_acked,
        m.survival_rate,
        m.sync_queries,
        m.async_queries,
        m.mean_recall,
        m.mean_precision,
        m.imm_created,
        m.imm_handoffs,
        m.imm_elections,
    );
    Ok(())
}

/// Apply `key=value` onto a scenario's tunables.
fn apply_param(sc: &mut Scenario, key: &str, value: &str) -> Result<(), CliError> {
    let num = || -> Result<u64, CliError> {
        value
            .parse()
            .map_err(|_| CliError::Other(anyhow::anyhow!("invalid number '{value}' for {key}")))
    };
    match key {
        "seed" => sc.seed = num()?,
        "horizon" => sc.horizon = num()?,
        "radio_range" => {
            sc.radio_range = value
                .parse()
                .map_err(|_| CliError::Other(anyhow::anyhow!("invalid number '{value}'")))?
        }
        "hop_latency" => sc.params.hop_latency = num()?,
        "flood_ttl" => sc.params.flood_ttl = num()? as u32,
        "t_probe" => sc.params.t_probe = num()?,
        "t_center" => sc.params.t_center = num()?,
        "t_heartbeat" => sc.params.t_heartbeat = num()?,
        "t_carry" => sc.params.t_carry = num()?,
        "carry_epsilon" => {
            sc.params.carry_epsilon = value
                .parse()
                .map_err(|_| CliError::Other(anyhow::anyhow!("invalid number '{value}'")))?
        }
        "predict_horizon" => sc.params.predict_horizon = num()?,
        "chunk_size" => sc.params.chunk_size = num()? as u32,
        "expiry_sweep" => sc.params.expiry_sweep = num()?,
        "strategy" => {
            sc.params.strategy = match value {
                "signoff" => ads_core::scenario::ReplicationStrategy::SignOff,
                "periodic" => ads_core::scenario::ReplicationStrategy::Periodic,
                other => {
                    return Err(CliError::Other(anyhow::anyhow!(
                        "strategy must be signoff|periodic, got '{other}'"
                    )))
                }
            }
        }
        other => {
            return Err(CliError::Other(anyhow::anyhow!(
                "unknown sweep parameter '{other}'"
            )))
        }
    }
    Ok(())
}

fn sweep(path: &Path, param: &str, seed: Option<u64>) -> Result<(), CliError> {
    let (key, values) = param
        .split_once('=')
        .ok_or_else(|| CliError::Other(anyhow::anyhow!("--param expects key=v1,v2,...")))?;
    let base = scenario::load(path)?;
    println!("{key}\tpublished\tacked\tsurvival\trecall\tprecision\tchunks_delivered\tdeficit_ticks\timm_handoffs");
    for value in values.split(',') {
        let mut sc = base.clone();
        apply_param(&mut sc, key, value)?;
        scenario::validate(&sc)?;
        let mut sim = Simulation::from_scenario(&sc, seed)?;
        sim.run();
        let m = metrics::compute(sim.trace(), sim.horizon());
        println!(
            "{value}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}",
            m.published,
            m.acked,
            m.survival_rate,
            m.mean_recall,
            m.mean_precision,
            m.chunks_delivered,
            m.deficit_total_ticks,
            m.imm_handoffs,
        );
    }
    Ok(())
}

fn plot(metrics_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(metrics_path)?;
    let series = metrics::parse_series(&text);
    if series.is_empty() {
        return Err(CliError::Other(anyhow::anyhow!(
            "no series found in {}",
            metrics_path.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let stem = metrics_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("metrics");
    for (name, points) in &series {
        let file = out_dir.join(format!("{stem}_{name}.svg"));
        let chart = svg::line_chart(name, points);
        std::fs::write(&file, chart)?;
        println!("wrote {}", file.display());
    }
    Ok(())
}

/// Smoke check used by the integration tests.
#[allow(dead_code)]
fn simtime(t: u64) -> SimTime {
    SimTime(t)
}
