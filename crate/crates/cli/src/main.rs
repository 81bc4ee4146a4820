use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use chainorch::bench::bench_controller;
use chainorch::provisioning::Policy;
use chainorch::scenario::Scenario;
use chainorch::sim::{affinity_audit, run_scale_experiment, run_scenario, RunOptions, ScaleConfig};
use chainorch::topology::TopologySpec;

#[derive(Parser)]
#[command(name = "chainorch", version, about = "Middlebox chain orchestration simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and write CSVs and a summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Many-chain satisfaction and efficiency experiment.
    ScaleExp {
        #[arg(long, default_value_t = 200)]
        chains: usize,
        #[arg(long, default_value_t = 500)]
        racks: usize,
        #[arg(long, default_value_t = 10)]
        slots: u32,
        /// Racks per aggregation switch.
        #[arg(long, default_value_t = 3)]
        agg_fanout: usize,
        /// Aggregation switches per core switch.
        #[arg(long, default_value_t = 167)]
        core_fanout: usize,
        /// Chains take turns adding one instance instead of growing to
        /// completion one after another.
        #[arg(long)]
        interleave: bool,
        /// Repeat to average over several seeds.
        #[arg(long, default_values_t = [1u64, 2, 3])]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check flow affinity across every provisioning event of a run.
    Audit {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time flow-distribution solves and placements.
    Bench {
        #[arg(long, default_value_t = 1000)]
        tenants: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("invalid scenario {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { scenario, out, seed, policy } => {
            let s = load(&scenario)?;
            let r = run_scenario(&s, RunOptions { seed, policy })?;
            r.write_outputs(&out)?;
            print!("{}", r.summary());
        }
        Cmd::ScaleExp { chains, racks, slots, agg_fanout, core_fanout, interleave, seed, out } => {
            let cfg = ScaleConfig {
                chains,
                topology: TopologySpec::new(racks, 1, slots).with_fanouts(agg_fanout, core_fanout),
                seeds: seed,
                interleave,
                ..ScaleConfig::default()
            };
            let r = run_scale_experiment(&cfg)?;
            r.write_outputs(&out)?;
            print!("{}", r.summary());
        }
        Cmd::Audit { scenario, seed } => {
            let s = load(&scenario)?;
            let r = affinity_audit(&s, RunOptions { seed, policy: None })?;
            println!(
                "{} flows admitted, {} provisioning events, {} traces checked, {} modified rules",
                r.flows_admitted, r.events, r.traces_checked, r.rules_modified
            );
            for d in &r.discrepancies {
                println!("t={:.1} flow {}: {}", d.time, d.flow, d.detail);
            }
            if !r.is_clean() {
                bail!("{} affinity discrepancies", r.discrepancies.len());
            }
            println!("no discrepancies");
        }
        Cmd::Bench { tenants, seed } => {
            let r = bench_controller(tenants, seed)?;
            print!("{}", r.table());
        }
        Cmd::Validate { scenario } => {
            let s = load(&scenario)?;
            println!("{}: ok ({} chains, {} middleboxes)", s.name, s.chains.len(), s.mboxes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
