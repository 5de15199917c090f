use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dcnlab::baselines::IndependentAgents;
use dcnlab::harness::{self, ExperimentConfig, MetricsReport, Policy, RunOptions};
use dcnlab::rl::write_log_csv;
use dcnlab::workload::{generate, write_trace_csv};
use dcnlab::ModelCheckpoint;

#[derive(Parser)]
#[command(name = "dcnlab", version, about = "Train and evaluate graph-based ECN tuning agents on a simulated fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Graphcc,
    Static,
    AccLike,
}

#[derive(Subcommand)]
enum Command {
    /// Train the message-passing model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode log, `episode,mean_reward,loss,epsilon`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train independent per-port agents on one scenario.
    TrainAcc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: String,
        /// Output directory for the manifest and per-agent networks.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Roll a policy out over a scenario and write a metrics report.
    Evaluate {
        #[arg(long, value_enum, default_value = "graphcc")]
        policy: PolicyKind,
        /// Checkpoint file (graphcc) or agent directory (acc-like).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scenario: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Bucket table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Per-flow results as CSV; one file per seed (`-seedN` suffix) when several run.
        #[arg(long)]
        flows: Option<PathBuf>,
        /// Per-interval agent port log as CSV, split per seed like `--flows`.
        #[arg(long)]
        port_log: Option<PathBuf>,
        /// Leave incast flows out of the statistics.
        #[arg(long)]
        exclude_incast: bool,
    },
    /// Normalize reports against a reference policy.
    Compare {
        #[arg(long)]
        reference: String,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Full comparison as JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the evaluation scenarios.
    Catalog {
        #[arg(long)]
        json: bool,
    },
    /// Write the flow trace a scenario generates for one seed.
    Trace {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(path)?, v)?;
    Ok(())
}

/// `runs.csv` becomes `runs-seed2.csv` when more than one seed is written.
fn seed_path(path: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds <= 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, out, log } => {
            let cfg = read_config(config.as_deref())?;
            let (outcome, ck) = harness::train_graphcc(&cfg)?;
            ck.save(&out)?;
            if let Some(p) = log {
                write_log_csv(&outcome.log, create(&p)?)?;
            }
            log::info!(
                "{} episodes, {} gradient steps, {} skipped; model written to {}",
                outcome.log.len(),
                outcome.gradient_steps,
                outcome.skipped_updates,
                out.display()
            );
        }
        Command::TrainAcc { config, scenario, out, log } => {
            let cfg = read_config(config.as_deref())?;
            let s = cfg.scenario(&scenario)?;
            let (outcome, table) = harness::train_acc(&cfg, &s)?;
            outcome.agents.save(&out, &table, cfg.train.seed)?;
            if let Some(p) = log {
                write_log_csv(&outcome.log, create(&p)?)?;
            }
            log::info!("{} agents written to {}", outcome.agents.nets.len(), out.display());
        }
        Command::Evaluate { policy, model, scenario, seeds, config, out, csv, flows, port_log, exclude_incast } => {
            let cfg = read_config(config.as_deref())?;
            let s = cfg.scenario(&scenario)?;
            let mut opts = RunOptions { exclude_incast: exclude_incast || cfg.exclude_incast, port_log: port_log.is_some(), ..cfg.run_options() };
            let policy = match policy {
                PolicyKind::Static => Policy::Static { p_max: cfg.static_p_max },
                PolicyKind::Graphcc => {
                    let path = model.context("--model is required for graphcc")?;
                    let ck = ModelCheckpoint::load(&path)?;
                    // features must be normalized the way the model was trained
                    opts.sim.queue_scale = ck.queue_scale;
                    Policy::from_checkpoint(&ck)?
                }
                PolicyKind::AccLike => {
                    let dir = model.context("--model is required for acc-like")?;
                    let (agents, table) = IndependentAgents::load(&dir)?;
                    Policy::AccLike { agents, table }
                }
            };
            let seeds = seeds.unwrap_or_else(|| s.seeds.clone());
            let (report, art) = harness::run(&s, &policy, &seeds, &opts)?;
            write_json(&out, &report)?;
            if let Some(p) = csv {
                harness::write_report_csv(&report, create(&p)?)?;
            }
            for &seed in &seeds {
                if let Some(p) = &flows {
                    let rows: Vec<_> = art.flows.iter().filter(|f| f.seed == seed).cloned().collect();
                    harness::write_flows_csv(&rows, create(&seed_path(p, seed, seeds.len()))?)?;
                }
                if let Some(p) = &port_log {
                    let rows: Vec<_> = art.port_log.iter().filter(|r| r.seed == seed).cloned().collect();
                    harness::write_port_log_csv(&rows, create(&seed_path(p, seed, seeds.len()))?)?;
                }
            }
            if report.unfinished > 0 {
                log::warn!("{} flows did not finish within the drain budget", report.unfinished);
            }
            println!(
                "{} on {}: mean slowdown {:.3}, throughput {:.3} Gbps/host, queue {:.0} B",
                report.policy,
                report.scenario,
                report.mean_slowdown,
                report.mean_throughput / 1e9,
                report.mean_queue
            );
        }
        Command::Compare { reference, reports, csv, out } => {
            let mut named: Vec<(String, MetricsReport)> = Vec::with_capacity(reports.len());
            for p in &reports {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let r: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                if r.schema_version != harness::REPORT_SCHEMA {
                    bail!("{}: unsupported report schema {}", p.display(), r.schema_version);
                }
                if named.iter().any(|(n, _)| *n == r.policy) {
                    bail!("two reports for policy {:?}", r.policy);
                }
                named.push((r.policy.clone(), r));
            }
            let c = harness::compare(&named, &reference)?;
            if let Some(p) = csv {
                harness::write_comparison_csv(&c, create(&p)?)?;
            }
            match out {
                Some(p) => write_json(&p, &c)?,
                None => {
                    for r in &c.rows {
                        println!(
                            "{:10} slowdown {:>7}  throughput {:>7}  queue {:>7}",
                            r.name,
                            harness::format_delta(r.slowdown_delta),
                            harness::format_delta(r.throughput_delta),
                            harness::format_delta(r.queue_delta)
                        );
                    }
                }
            }
        }
        Command::Catalog { json } => {
            let cat = harness::scenario_catalog();
            if json {
                println!("{}", serde_json::to_string_pretty(&cat)?);
            } else {
                for s in cat {
                    println!(
                        "{:20} {:10} load {:.0}% incast {:3} topology {:?} seeds {:?}",
                        s.name,
                        s.workload,
                        s.load * 100.0,
                        if s.incast { "on" } else { "off" },
                        s.topology,
                        s.seeds
                    );
                }
            }
        }
        Command::Trace { scenario, seed, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let s = cfg.scenario(&scenario)?;
            let topo = s.topology.build()?;
            let flows = generate(&topo, &s.traffic(seed)?)?;
            write_trace_csv(&topo, &flows, create(&out)?)?;
            log::info!("{} flows written to {}", flows.len(), out.display());
        }
    }
    Ok(())
}
